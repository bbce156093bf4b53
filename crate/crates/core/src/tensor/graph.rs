use std::borrow::Cow;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Softmax {
        x: Var,
        temperature: F,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    CausalMask(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, u32)>,
        probs: Vec<F>,
    },
    Sum(Var),
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward walks it in reverse.
///
/// Parameters are borrowed, not copied: the graph lives no longer than the
/// parameter store it reads.
pub struct Graph<'p, F: Scalar> {
    nodes: Vec<Node<'p, F>>,
    param_count: usize,
}

/// Gradients indexed by the parameter slot passed to [`Graph::param`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    blocks: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, slot: usize) -> Option<&Tensor<F>> {
        self.blocks.get(slot).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn from_blocks(blocks: Vec<Option<Tensor<F>>>) -> Self {
        Self { blocks }
    }

    pub fn blocks_mut(&mut self) -> &mut [Option<Tensor<F>>] {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> Vec<Option<Tensor<F>>> {
        self.blocks
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, F: Scalar> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a trainable tensor under a gradient slot.
    pub fn param(&mut self, slot: usize, tensor: &'p Tensor<F>) -> Var {
        self.param_count = self.param_count.max(slot + 1);
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Param(slot),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.push(tensor, Op::Constant)
    }

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared across the leading axes of `a`, or carries the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let geo = MatMulGeometry::new(self.shape(a), self.shape(b), trans_b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![F::zero(); geo.batch * geo.m * geo.n];
        for t in 0..geo.batch {
            let a_t = &av.data()[t * geo.m * geo.k..(t + 1) * geo.m * geo.k];
            let b_off = if geo.shared_b { 0 } else { t * geo.k * geo.n };
            let b_t = &bv.data()[b_off..b_off + geo.k * geo.n];
            let c_t = &mut out[t * geo.m * geo.n..(t + 1) * geo.m * geo.n];
            if trans_b {
                gemm_nt(geo.m, geo.k, geo.n, a_t, b_t, c_t);
            } else {
                gemm_nn(geo.m, geo.k, geo.n, a_t, b_t, c_t);
            }
        }
        let mut shape = av.shape()[..av.shape().len() - 2].to_vec();
        shape.extend([geo.m, geo.n]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x + bias` with `bias` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let (xv, bv) = (self.value(x), self.value(bias));
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (y, &b) in row.iter_mut().zip(bv.data()) {
                *y += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| v * factor).collect(),
        };
        self.push(t, Op::Scale(x, factor))
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: F) -> Result<Var> {
        if !(temperature > F::zero()) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive and finite, got {temperature:?}"
            )));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            kernels::softmax_row(row, temperature);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { x, temperature }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// A zero-variance row normalizes to zeros.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let inv_d = F::one() / F::lit(d as f64);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| kernels::gelu(v)).collect(),
        };
        self.push(t, Op::Gelu(x))
    }

    /// Gather rows of `table` ([rows, d]) → [ids.len(), d].
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(mismatch("embedding", tv.shape(), &[ids.len()]));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let i = id as usize;
            if i >= rows {
                return Err(Error::TokenOutOfRange { id, size: rows });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(mismatch("reshape", xv.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(mismatch("permute", xv.shape(), axes));
        }
        let (shape, data) = permute_data(xv.shape(), xv.data(), axes);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(mismatch("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Inverted dropout. `p == 0` returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: F, rng: &mut R) -> Result<Var> {
        if !(p >= F::zero() && p < F::one()) {
            return Err(Error::InvalidArgument(format!("dropout p must lie in [0,1), got {p:?}")));
        }
        if p == F::zero() {
            return Ok(x);
        }
        let keep_scale = F::one() / (F::one() - p);
        let p64 = p.as_f64();
        let xv = self.value(x);
        let mask: Vec<F> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p64 { F::zero() } else { keep_scale })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Set entries above the diagonal of the trailing square matrices to −∞.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(mismatch("causal_mask", s, &[]));
        }
        let n = s[s.len() - 1];
        let mut data = xv.data().to_vec();
        for mat in data.chunks_mut(n * n) {
            for i in 0..n {
                for v in &mut mat[i * n + i + 1..(i + 1) * n] {
                    *v = F::neg_infinity();
                }
            }
        }
        let t = Tensor::new(s.to_vec(), data)?;
        Ok(self.push(t, Op::CausalMask(x)))
    }

    /// Summed negative log-likelihood of `targets` (row, token) under the
    /// softmax of `logits` rows. When `support` is given the softmax runs over
    /// supported columns only and every target must be supported. Rows not
    /// named in `targets` receive no gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[(usize, u32)],
        support: Option<&Arc<[bool]>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.len() / v;
        if let Some(s) = support {
            if s.len() != v {
                return Err(mismatch("cross_entropy", lv.shape(), &[s.len()]));
            }
        }
        let mut probs = vec![F::zero(); targets.len() * v];
        let mut total = F::zero();
        for (k, &(row, tgt)) in targets.iter().enumerate() {
            if row >= rows {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy row {row} out of range for {rows} rows"
                )));
            }
            let t = tgt as usize;
            if t >= v {
                return Err(Error::TokenOutOfRange { id: tgt, size: v });
            }
            let allowed = |j: usize| support.is_none_or(|s| s[j]);
            if !allowed(t) {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy target {tgt} is outside the output support"
                )));
            }
            let x = &lv.data()[row * v..(row + 1) * v];
            let max = (0..v)
                .filter(|&j| allowed(j))
                .fold(F::neg_infinity(), |m, j| m.max(x[j]));
            let p = &mut probs[k * v..(k + 1) * v];
            let mut sum = F::zero();
            for j in (0..v).filter(|&j| allowed(j)) {
                p[j] = (x[j] - max).exp();
                sum += p[j];
            }
            for pj in p.iter_mut() {
                *pj = *pj / sum;
            }
            total += sum.ln() + max - x[t];
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse-mode sweep from a scalar `loss`. Every registered parameter
    /// gets a gradient block; parameters the loss does not touch get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut blocks: Vec<Option<Tensor<F>>> = vec![None; self.param_count];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads, &mut blocks);
        }
        for node in &self.nodes {
            if let Op::Param(slot) = node.op {
                blocks[slot].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { blocks })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        blocks: &mut [Option<Tensor<F>>],
    ) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
            }};
        }
        match &node.op {
            Op::Constant => {}
            Op::Param(slot) => {
                let block = blocks[*slot].get_or_insert_with(|| Tensor::zeros(out.shape()));
                for (b, &x) in block.data_mut().iter_mut().zip(g) {
                    *b += x;
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let geo = MatMulGeometry::new(self.shape(*a), self.shape(*b), *trans_b)
                    .expect("validated in forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (geo.m, geo.k, geo.n);
                {
                    let ga = acc!(*a);
                    for t in 0..geo.batch {
                        let b_off = if geo.shared_b { 0 } else { t * k * n };
                        let b_t = &bv[b_off..b_off + k * n];
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let ga_t = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            gemm_nn(m, n, k, g_t, b_t, ga_t);
                        } else {
                            gemm_nt(m, n, k, g_t, b_t, ga_t);
                        }
                    }
                }
                let gb = acc!(*b);
                for t in 0..geo.batch {
                    let b_off = if geo.shared_b { 0 } else { t * k * n };
                    let a_t = &av[t * m * k..(t + 1) * m * k];
                    let g_t = &g[t * m * n..(t + 1) * m * n];
                    let gb_t = &mut gb[b_off..b_off + k * n];
                    if *trans_b {
                        gemm_tn(m, n, k, g_t, a_t, gb_t);
                    } else {
                        gemm_tn(m, k, n, a_t, g_t, gb_t);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                for (d, &x) in acc!(*b).iter_mut().zip(g) {
                    *d -= x;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for ((d, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                    *d += x * y;
                }
                for ((d, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                    *d += x * y;
                }
            }
            Op::AddBias(x, bias) => {
                add_into(acc!(*x), g);
                let d = self.value(*bias).len();
                let gb = acc!(*bias);
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            }
            Op::Scale(x, factor) => {
                for (d, &v) in acc!(*x).iter_mut().zip(g) {
                    *d += v * *factor;
                }
            }
            Op::Softmax { x, temperature } => {
                let d = out.last_dim();
                let gx = acc!(*x);
                for ((y, gy), gx) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: F = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[j] += y[j] * (gy[j] - dot) / *temperature;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data().to_vec();
                {
                    let gg = acc!(*gain);
                    for (h, dy) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dy[j] * h[j];
                        }
                    }
                }
                {
                    let gbias = acc!(*bias);
                    for dy in g.chunks(d) {
                        add_into(gbias, dy);
                    }
                }
                let inv_d = F::one() / F::lit(d as f64);
                let gx = acc!(*x);
                let mut dxhat = vec![F::zero(); d];
                for (r, ((h, dy), gx)) in xhat
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dxhat[j] = dy[j] * gv[j];
                    }
                    let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_d;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for j in 0..d {
                        gx[j] += rstd[r] * (dxhat[j] - mean_dxhat - h[j] * mean_dxhat_xhat);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                for ((d, &dy), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    *d += dy * kernels::gelu_grad(v);
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.last_dim();
                let gt = acc!(*table);
                for (k, &id) in ids.iter().enumerate() {
                    let i = id as usize;
                    add_into(&mut gt[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                }
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(out.shape(), g, &inverse);
                add_into(acc!(*x), &back);
            }
            Op::Dropout { x, mask } => {
                for ((d, &dy), &m) in acc!(*x).iter_mut().zip(g).zip(mask) {
                    *d += dy * m;
                }
            }
            Op::CausalMask(x) => {
                let n = out.last_dim();
                let gx = acc!(*x);
                for (gm, dm) in gx.chunks_mut(n * n).zip(g.chunks(n * n)) {
                    for i in 0..n {
                        add_into(&mut gm[i * n..i * n + i + 1], &dm[i * n..i * n + i + 1]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0];
                let gl = acc!(*logits);
                for (k, &(row, tgt)) in targets.iter().enumerate() {
                    let p = &probs[k * v..(k + 1) * v];
                    let gr = &mut gl[row * v..(row + 1) * v];
                    for j in 0..v {
                        gr[j] += scale * p[j];
                    }
                    gr[tgt as usize] -= scale;
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                for d in acc!(*x).iter_mut() {
                    *d += s;
                }
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data<F: Scalar>(shape: &[usize], data: &[F], axes: &[usize]) -> (Vec<usize>, Vec<F>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

struct MatMulGeometry {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatMulGeometry {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let err = || mismatch(if trans_b { "matmul_t" } else { "matmul" }, a, b);
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if bk != k {
            return Err(err());
        }
        let lead_a = &a[..a.len() - 2];
        let lead_b = &b[..b.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(err());
        }
        Ok(Self {
            batch: lead_a.iter().product(),
            m,
            k,
            n,
            shared_b,
        })
    }
}
