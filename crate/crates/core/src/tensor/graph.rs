use rand::Rng;
use rayon::prelude::*;

use super::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// Rows per parallel matmul chunk. Fixed so results never depend on the
// worker count.
const GEMM_ROW_CHUNK: usize = 256;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRows {
        x: Var,
        rows: Var,
        period: usize,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        width: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        tau: T,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
}

/// Execution-ordered record of primitive operations.
///
/// Leaves created from tensors with `requires_grad` receive gradients on
/// [`Graph::backward`]. Leaf gradients accumulate across calls until
/// [`Graph::zero_grad`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients; `backward` on it is an error.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad: needs_grad && self.grad_enabled,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Records a leaf that owns its data and never receives gradients.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Records a differentiable leaf that owns its data.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::InvalidArgument(format!(
                "{op}: expected a matrix, got shape {s:?}"
            ))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push(op, shape, value, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Op::Scale(x, c), shape, value, needs)
    }

    /// Adds `rows` (shape `[r, d]` or `[d]`) to every block of `r` rows of
    /// `x` (shape `[.., d]`). Covers bias addition and positional encodings.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rs = self.shape(rows).to_vec();
        let d = *xs.last().expect("non-empty shape");
        let (period, rd) = match rs[..] {
            [rd] => (1, rd),
            [r, rd] => (r, rd),
            _ => return Err(Error::shape("add_rows", &xs, &rs)),
        };
        let total_rows = self.value(x).len() / d;
        if rd != d || total_rows % period != 0 {
            return Err(Error::shape("add_rows", &xs, &rs));
        }
        let xv = self.value(x);
        let rv = self.value(rows);
        let mut value = xv.to_vec();
        for (i, row) in value.chunks_exact_mut(d).enumerate() {
            let src = &rv[(i % period) * d..(i % period + 1) * d];
            row.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
        }
        let needs = self.needs(&[x, rows]);
        Ok(self.push(Op::AddRows { x, rows, period }, xs, value, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_rows(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
            false,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Transpose(x), vec![c, r], out, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.contains(&0) || shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), shape, value, needs))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = self.value(x).to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                softmax_strided(&mut value, base, len, inner);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            shape,
            value,
            needs,
        ))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / width;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut value = vec![T::zero(); xv.len()];
        for (src, dst) in xv.chunks_exact(width).zip(value.chunks_exact_mut(width)) {
            let mu = src.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / width as f64;
            let var = src
                .iter()
                .map(|v| {
                    let c = v.to_f64_lossy() - mu;
                    c * c
                })
                .sum::<f64>()
                / width as f64;
            let rs = 1.0 / (var + eps.to_f64_lossy()).sqrt();
            let (mu_t, rs_t) = (T::from_f64_lossy(mu), T::from_f64_lossy(rs));
            for i in 0..width {
                dst[i] = (src[i] - mu_t) * rs_t * gv[i] + bv[i];
            }
            mean.push(mu_t);
            rstd.push(rs_t);
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                mean,
                rstd,
            },
            shape,
            value,
            needs,
        ))
    }

    /// Exact GELU, `x * Phi(x)` with the error-function CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Op::Gelu(x), shape, value, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        let needs = self.needs(&[x]);
        self.push(Op::Sum(x), vec![1], vec![T::from_f64_lossy(s)], needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / xv.len() as f64;
        let needs = self.needs(&[x]);
        self.push(Op::Mean(x), vec![1], vec![T::from_f64_lossy(s)], needs)
    }

    /// Gathers rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "select_rows: row {bad} out of range for {r} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("select_rows: empty selection".into()));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            value.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            vec![rows.len(), c],
            value,
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows: no inputs".into()))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            total += r;
        }
        let mut value = Vec::with_capacity(total * c);
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let needs = self.needs(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![total, c], value, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols: no inputs".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r, total], value, needs))
    }

    /// Multiplies by a fresh inverted-dropout mask drawn from `rng`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(self.shape(x).to_vec(), mask)?;
        self.mul(x, m)
    }

    /// Fused multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch * seq, 3 * d]` with column blocks `[Q | K | V]`; head
    /// `h` owns columns `h * d_k .. (h + 1) * d_k` of each block. Returns the
    /// concatenated head outputs `[batch * seq, d]`, before the output
    /// projection.
    pub fn multi_head_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        tau: T,
    ) -> Result<Var> {
        let (rows, width) = self.dims2(qkv, "multi_head_attention")?;
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads.max(1) != 0 || heads == 0
        {
            return Err(Error::shape(
                "multi_head_attention",
                self.shape(qkv),
                &[batch * seq, 3 * heads],
            ));
        }
        if !(tau > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "attention temperature must be positive, got {tau}"
            )));
        }
        let d = width / 3;
        let dk = d / heads;
        let src = self.value(qkv);
        let blocks: Vec<(Vec<T>, Vec<T>)> = (0..batch * heads)
            .into_par_iter()
            .map(|bh| {
                let (b, h) = (bh / heads, bh % heads);
                let base = b * seq * width + h * dk;
                let q = &src[base..];
                let k = &src[base + d..];
                let v = &src[base + 2 * d..];
                let mut p = vec![T::zero(); seq * seq];
                T::gemm(
                    seq,
                    dk,
                    seq,
                    T::one() / tau,
                    q,
                    (width as isize, 1),
                    k,
                    (1, width as isize),
                    T::zero(),
                    &mut p,
                    (seq as isize, 1),
                );
                for row in p.chunks_exact_mut(seq) {
                    softmax_strided(row, 0, seq, 1);
                }
                let mut o = vec![T::zero(); seq * dk];
                T::gemm(
                    seq,
                    seq,
                    dk,
                    T::one(),
                    &p,
                    (seq as isize, 1),
                    v,
                    (width as isize, 1),
                    T::zero(),
                    &mut o,
                    (dk as isize, 1),
                );
                (p, o)
            })
            .collect();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(batch * heads * seq * seq);
        for (bh, (p, o)) in blocks.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            for i in 0..seq {
                let dst = (b * seq + i) * d + h * dk;
                out[dst..dst + dk].copy_from_slice(&o[i * dk..(i + 1) * dk]);
            }
            probs.extend_from_slice(&p);
        }
        let needs = self.needs(&[qkv]);
        Ok(self.push(
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                tau,
                probs,
            },
            vec![rows, d],
            out,
            needs,
        ))
    }

    /// Attention probabilities recorded by a fused attention node, laid out
    /// `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over rows of `-sum_k target_k * log_softmax(logits)_k`.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let (b, k) = self.dims2(logits, "cross_entropy_soft")?;
        if targets.len() != b * k {
            return Err(Error::shape("cross_entropy_soft", &[b, k], &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut total = 0.0f64;
        for (r, row) in lv.chunks_exact(k).enumerate() {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.to_f64_lossy()));
            let lse = m + row
                .iter()
                .map(|v| (v.to_f64_lossy() - m).exp())
                .sum::<f64>()
                .ln();
            let t = &targets[r * k..(r + 1) * k];
            for j in 0..k {
                let lj = row[j].to_f64_lossy();
                total -= t[j].to_f64_lossy() * (lj - lse);
                probs[r * k + j] = T::from_f64_lossy((lj - lse).exp());
            }
        }
        let loss = T::from_f64_lossy(total / b as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`; adds into the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.grad_enabled {
            return Err(Error::InvalidArgument(
                "backward called on an inference graph".into(),
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backward_node(nodes, i, &g, &mut adj, &mut self.leaf_grads);
        }
        Ok(())
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(slot);
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    adj: &mut [Option<Vec<T>>],
    leaf_grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => match leaf_grads[i].as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, d)| *a += *d),
            None => leaf_grads[i] = Some(g.to_vec()),
        },
        Op::Add(a, b) => {
            accumulate(nodes, adj, *a, |s| add_into(s, g));
            accumulate(nodes, adj, *b, |s| add_into(s, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, adj, *a, |s| add_into(s, g));
            accumulate(nodes, adj, *b, |s| {
                s.iter_mut().zip(g).for_each(|(a, d)| *a -= *d)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, adj, *a, |s| {
                for ((s, d), y) in s.iter_mut().zip(g).zip(bv) {
                    *s += *d * *y;
                }
            });
            accumulate(nodes, adj, *b, |s| {
                for ((s, d), x) in s.iter_mut().zip(g).zip(av) {
                    *s += *d * *x;
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, adj, *x, |s| {
            s.iter_mut().zip(g).for_each(|(a, d)| *a += *d * *c)
        }),
        Op::AddRows { x, rows, period } => {
            accumulate(nodes, adj, *x, |s| add_into(s, g));
            let d = *node.shape.last().expect("shape");
            accumulate(nodes, adj, *rows, |s| {
                for (r, row) in g.chunks_exact(d).enumerate() {
                    let dst = &mut s[(r % period) * d..(r % period + 1) * d];
                    add_into(dst, row);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            // dA = dC · B^T
            accumulate(nodes, adj, *a, |s| {
                gemm_rows(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    (n as isize, 1),
                    bv,
                    (1, n as isize),
                    s,
                    true,
                )
            });
            // dB = A^T · dC
            accumulate(nodes, adj, *b, |s| {
                gemm_rows(
                    k,
                    m,
                    n,
                    T::one(),
                    av,
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    s,
                    true,
                )
            });
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            accumulate(nodes, adj, *x, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, adj, *x, |s| add_into(s, g)),
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            accumulate(nodes, adj, *x, |s| {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let dot: T = (0..*len)
                            .map(|t| g[base + t * inner] * y[base + t * inner])
                            .sum();
                        for t in 0..*len {
                            let idx = base + t * inner;
                            s[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            width,
            mean,
            rstd,
        } => {
            let w = *width;
            let xv = &nodes[x.0].value;
            let gv = &nodes[gamma.0].value;
            let xhat = |r: usize, c: usize| (xv[r * w + c] - mean[r]) * rstd[r];
            let rows = xv.len() / w;
            accumulate(nodes, adj, *gamma, |s| {
                for r in 0..rows {
                    for c in 0..w {
                        s[c] += g[r * w + c] * xhat(r, c);
                    }
                }
            });
            accumulate(nodes, adj, *beta, |s| {
                for row in g.chunks_exact(w) {
                    add_into(s, row);
                }
            });
            accumulate(nodes, adj, *x, |s| {
                let wt = T::from_usize(w).expect("width");
                let mut dxhat = vec![T::zero(); w];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..w {
                        dxhat[c] = g[r * w + c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat(r, c);
                    }
                    mean_d /= wt;
                    mean_dx /= wt;
                    for c in 0..w {
                        s[r * w + c] += rstd[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &nodes[x.0].value;
            accumulate(nodes, adj, *x, |s| {
                for ((s, d), &v) in s.iter_mut().zip(g).zip(xv) {
                    *s += *d * gelu_grad(v);
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, adj, *x, |s| s.iter_mut().for_each(|a| *a += g[0])),
        Op::Mean(x) => {
            let n = T::from_usize(nodes[x.0].value.len()).expect("len");
            accumulate(nodes, adj, *x, |s| s.iter_mut().for_each(|a| *a += g[0] / n));
        }
        Op::SelectRows { x, rows } => {
            let c = node.shape[1];
            accumulate(nodes, adj, *x, |s| {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut s[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                accumulate(nodes, adj, *p, |s| add_into(s, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (node.shape[0], node.shape[1]);
            let mut col = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                accumulate(nodes, adj, *p, |s| {
                    for i in 0..r {
                        add_into(
                            &mut s[i * w..(i + 1) * w],
                            &g[i * total + col..i * total + col + w],
                        );
                    }
                });
                col += w;
            }
        }
        Op::Attention {
            qkv,
            batch,
            seq,
            heads,
            tau,
            probs,
        } => {
            let (batch, seq, heads, tau) = (*batch, *seq, *heads, *tau);
            let width = nodes[qkv.0].shape[1];
            let d = width / 3;
            let dk = d / heads;
            let src = &nodes[qkv.0].value;
            accumulate(nodes, adj, *qkv, |s| {
                let blocks: Vec<[Vec<T>; 3]> = (0..batch * heads)
                    .into_par_iter()
                    .map(|bh| {
                        attention_block_backward(src, g, probs, bh, seq, heads, width, tau)
                    })
                    .collect();
                for (bh, [dq, dkk, dv]) in blocks.into_iter().enumerate() {
                    let (b, h) = (bh / heads, bh % heads);
                    for i in 0..seq {
                        let row = (b * seq + i) * width + h * dk;
                        add_into(&mut s[row..row + dk], &dq[i * dk..(i + 1) * dk]);
                        add_into(&mut s[row + d..row + d + dk], &dkk[i * dk..(i + 1) * dk]);
                        add_into(
                            &mut s[row + 2 * d..row + 2 * d + dk],
                            &dv[i * dk..(i + 1) * dk],
                        );
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let (b, k) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
            let scale = g[0] / T::from_usize(b).expect("batch");
            accumulate(nodes, adj, *logits, |s| {
                for r in 0..b {
                    let t = &targets[r * k..(r + 1) * k];
                    let mass: T = t.iter().copied().sum();
                    for j in 0..k {
                        s[r * k + j] += scale * (mass * probs[r * k + j] - t[j]);
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_block_backward<T: Real>(
    src: &[T],
    g: &[T],
    probs: &[T],
    bh: usize,
    seq: usize,
    heads: usize,
    width: usize,
    tau: T,
) -> [Vec<T>; 3] {
    let d = width / 3;
    let dk = d / heads;
    let (b, h) = (bh / heads, bh % heads);
    let base = b * seq * width + h * dk;
    let q = &src[base..];
    let k = &src[base + d..];
    let v = &src[base + 2 * d..];
    let p = &probs[bh * seq * seq..(bh + 1) * seq * seq];
    let dout = &g[b * seq * d + h * dk..];
    let (ws, ds, ss) = (width as isize, d as isize, seq as isize);

    // dP = dO · V^T
    let mut dp = vec![T::zero(); seq * seq];
    T::gemm(seq, dk, seq, T::one(), dout, (ds, 1), v, (1, ws), T::zero(), &mut dp, (ss, 1));
    // dV = P^T · dO
    let mut dv = vec![T::zero(); seq * dk];
    T::gemm(
        seq,
        seq,
        dk,
        T::one(),
        p,
        (1, ss),
        dout,
        (ds, 1),
        T::zero(),
        &mut dv,
        (dk as isize, 1),
    );
    // dS = P ⊙ (dP - rowsum(dP ⊙ P))
    for (prow, drow) in p.chunks_exact(seq).zip(dp.chunks_exact_mut(seq)) {
        let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
        for (dv, pv) in drow.iter_mut().zip(prow) {
            *dv = *pv * (*dv - dot);
        }
    }
    let inv = T::one() / tau;
    let mut dq = vec![T::zero(); seq * dk];
    T::gemm(seq, seq, dk, inv, &dp, (ss, 1), k, (ws, 1), T::zero(), &mut dq, (dk as isize, 1));
    let mut dkk = vec![T::zero(); seq * dk];
    T::gemm(seq, seq, dk, inv, &dp, (1, ss), q, (ws, 1), T::zero(), &mut dkk, (dk as isize, 1));
    [dq, dkk, dv]
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

fn softmax_strided<T: Real>(buf: &mut [T], base: usize, len: usize, stride: usize) {
    let mut m = T::neg_infinity();
    for t in 0..len {
        m = m.max(buf[base + t * stride]);
    }
    let mut total = T::zero();
    for t in 0..len {
        let e = (buf[base + t * stride] - m).exp();
        buf[base + t * stride] = e;
        total += e;
    }
    for t in 0..len {
        buf[base + t * stride] /= total;
    }
}

/// `c (+)= alpha * a · b`, split into fixed row chunks that run in parallel.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    c: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    if m <= GEMM_ROW_CHUNK {
        T::gemm(m, k, n, alpha, a, sa, b, sb, beta, c, (n as isize, 1));
        return;
    }
    c.par_chunks_mut(GEMM_ROW_CHUNK * n)
        .enumerate()
        .for_each(|(chunk, out)| {
            let r0 = chunk * GEMM_ROW_CHUNK;
            let rows = out.len() / n;
            let a_off = r0 * sa.0 as usize;
            T::gemm(rows, k, n, alpha, &a[a_off..], sa, b, sb, beta, out, (n as isize, 1));
        });
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    x * half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let xf = x.to_f64_lossy();
    let cdf = 0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64_lossy(cdf + xf * pdf)
}

/// Eager matrix product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out, false);
    Tensor::new(vec![m, n], out)
}
