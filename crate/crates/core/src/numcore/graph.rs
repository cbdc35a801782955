use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Split of a shape around one axis: `outer x axis_len x inner`.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(AxisSplit {
            outer: shape[..axis].iter().product(),
            axis_len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn at(&self, o: usize, a: usize, i: usize) -> usize {
        (o * self.axis_len + a) * self.inner + i
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        split: AxisSplit,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    EmbedLookup {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean {
        x: Var,
        split: AxisSplit,
    },
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    mask: Vec<bool>,
    batch: usize,
    len: usize,
    heads: usize,
    /// `[batch, heads, len, len]` attention weights.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations in creation (topological) order.
///
/// Leaves are either parameters, which receive gradients, or constants,
/// which do not. [`Graph::backward`] walks the tape once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// laid out as `[batch, heads, len, len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(cache) => Some(&cache.probs),
            _ => None,
        }
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Transpose { x, rows, cols }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a vector to every last-axis row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::Shape(format!(
                "add_bias: bias shape {:?} does not match last dimension {cols}",
                self.shape(bias)
            )));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Normalizes each last-axis row, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.shape(v) != [cols] {
                return Err(Error::Shape(format!(
                    "layernorm: {name} shape {:?} does not match last dimension {cols}",
                    self.shape(v)
                )));
            }
        }
        let rows = self.value(x).rows();
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.data(x).chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = AxisSplit::new(self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let max = (0..split.axis_len)
                    .map(|a| src[split.at(o, a, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..split.axis_len {
                    let e = (src[split.at(o, a, i)] - max).exp();
                    out[split.at(o, a, i)] = e;
                    total += e;
                }
                for a in 0..split.axis_len {
                    out[split.at(o, a, i)] /= total;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax { x, split }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with a `None` target are ignored; if every row is
    /// ignored the loss is 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, classes) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {bad} out of range for {classes} classes"
            )));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Row gather: output row `i` is row `ids[i]` of `table`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "embed_lookup")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "embed_lookup: id {bad} out of range for {rows} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            value,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Flat gather into a tensor of `shape`: `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: &[usize], shape: Vec<usize>) -> Result<Var> {
        let numel = self.value(x).numel();
        if let Some(bad) = index.iter().find(|&&i| i >= numel) {
            return Err(Error::InvalidArgument(format!("gather: index {bad} out of range")));
        }
        let src = self.data(x);
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tail = self.shape(first).get(1..).unwrap_or_default().to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat: shape {s:?} incompatible with {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = AxisSplit::new(self.shape(x), axis)?;
        if split.axis_len == 0 {
            return Err(Error::Shape("mean over an empty axis".into()));
        }
        let src = self.data(x);
        let mut out = vec![0.0; split.outer * split.inner];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let s: f64 = (0..split.axis_len).map(|a| src[split.at(o, a, i)]).sum();
                out[o * split.inner + i] = s / split.axis_len as f64;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Mean { x, split }, rg))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `len` positions each; `q`, `k`, `v` are `[batch*len, d]`.
    ///
    /// Positions with `mask[p] == false` are neither attended to nor attend:
    /// they get zero weight as keys and a zero output row as queries.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        batch: usize,
        len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if rows != batch * len || mask.len() != rows {
            return Err(Error::Shape(format!(
                "attention: {rows} rows and {} mask entries for batch {batch} x len {len}",
                mask.len()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; len];
        for b in 0..batch {
            let base = b * len;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..len {
                    if !mask[base + i] {
                        continue;
                    }
                    let qi = &qd[(base + i) * d + col..(base + i) * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if mask[base + j] {
                            let kj = &kd[(base + j) * d + col..(base + j) * d + col + dh];
                            scores[j] = scale * dot(qi, kj);
                            max = max.max(scores[j]);
                        }
                    }
                    let p_row = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    let mut total = 0.0;
                    for j in 0..len {
                        if mask[base + j] {
                            p_row[j] = (scores[j] - max).exp();
                            total += p_row[j];
                        }
                    }
                    let o_row = &mut out[(base + i) * d + col..(base + i) * d + col + dh];
                    for j in 0..len {
                        if mask[base + j] {
                            p_row[j] /= total;
                            let vj = &vd[(base + j) * d + col..(base + j) * d + col + dh];
                            for (o, &x) in o_row.iter_mut().zip(vj) {
                                *o += p_row[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.needs(&[q, k, v]);
        let cache = AttentionCache {
            q,
            k,
            v,
            mask: mask.to_vec(),
            batch,
            len,
            heads,
            probs,
        };
        Ok(self.push(value, Op::Attention(Box::new(cache)), rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient buffer for `v`, or None when `v` needs no gradient.
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = slot!(a) {
                    // ga = g · bᵀ
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(g_row, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = slot!(b) {
                    // gb = aᵀ · g
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for (gbj, &gj) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *gbj += aip * gj;
                            }
                        }
                    }
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(gx) = slot!(x) {
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot!(v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(bias) {
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = slot!(a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = slot!(b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                }
            }
            &Op::Scale(x, factor) => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            &Op::Gelu(x) => {
                let xd = self.data(x);
                if let Some(gx) = slot!(x) {
                    for ((acc, gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *acc += gi * gelu_grad_scalar(xi);
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
                let cols = if rstd.is_empty() { 1 } else { xhat.len() / rstd.len() };
                let gd = self.data(*gain);
                if let Some(gg) = slot!(*gain) {
                    for (row_g, row_h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for row_g in g.chunks(cols) {
                        gb.iter_mut().zip(row_g).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dxhat = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * cols..(r + 1) * cols];
                        let row_h = &xhat[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dxhat[j] = row_g[j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh = dot(&dxhat, row_h) / cols as f64;
                        for j in 0..cols {
                            gx[r * cols + j] += rs * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Softmax { x, split } => {
                let y = node.value.data();
                if let Some(gx) = slot!(x) {
                    for o in 0..split.outer {
                        for i in 0..split.inner {
                            let s: f64 = (0..split.axis_len)
                                .map(|a| g[split.at(o, a, i)] * y[split.at(o, a, i)])
                                .sum();
                            for a in 0..split.axis_len {
                                let at = split.at(o, a, i);
                                gx[at] += y[at] * (g[at] - s);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let classes = probs.len() / targets.len();
                let w = g[0] / *count as f64;
                if let Some(gl) = slot!(*logits) {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let row = r * classes;
                        for c in 0..classes {
                            gl[row + c] += w * probs[row + c];
                        }
                        gl[row + t] -= w;
                    }
                }
            }
            Op::EmbedLookup { table, ids } => {
                if let Some(gt) = slot!(*table) {
                    let cols = gt.len() / nodes[table.0].value.shape()[0];
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        gt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = slot!(*x) {
                    for (gi, &i) in g.iter().zip(index) {
                        gx[i] += gi;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = slot!(p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Mean { x, split } => {
                if let Some(gx) = slot!(x) {
                    let w = 1.0 / split.axis_len as f64;
                    for o in 0..split.outer {
                        for i in 0..split.inner {
                            let gi = g[o * split.inner + i] * w;
                            for a in 0..split.axis_len {
                                gx[split.at(o, a, i)] += gi;
                            }
                        }
                    }
                }
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let d = self.value(c.q).cols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let len = c.len;
        let (qd, kd, vd) = (self.data(c.q), self.data(c.k), self.data(c.v));
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; len];
        for b in 0..c.batch {
            let base = b * len;
            for h in 0..c.heads {
                let col = h * dh;
                for i in 0..len {
                    if !c.mask[base + i] {
                        continue;
                    }
                    let p_row = &c.probs[((b * c.heads + h) * len + i) * len..][..len];
                    let g_row = &g[(base + i) * d + col..(base + i) * d + col + dh];
                    let mut weighted = 0.0;
                    for j in 0..len {
                        if !c.mask[base + j] {
                            continue;
                        }
                        let vj = (base + j) * d + col;
                        dp[j] = dot(g_row, &vd[vj..vj + dh]);
                        weighted += p_row[j] * dp[j];
                        for (acc, &x) in gv[vj..vj + dh].iter_mut().zip(g_row) {
                            *acc += p_row[j] * x;
                        }
                    }
                    let qi = (base + i) * d + col;
                    for j in 0..len {
                        if !c.mask[base + j] {
                            continue;
                        }
                        let ds = p_row[j] * (dp[j] - weighted) * scale;
                        let kj = (base + j) * d + col;
                        for t in 0..dh {
                            gq[qi + t] += ds * kd[kj + t];
                            gk[kj + t] += ds * qd[qi + t];
                        }
                    }
                }
            }
        }
        for (var, local) in [(c.q, gq), (c.k, gk), (c.v, gv)] {
            let n = &self.nodes[var.0];
            if !n.requires_grad {
                continue;
            }
            let buf = grads[var.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            buf.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}
