//! Tape-based reverse-mode automatic differentiation over [`Array`] values.
//!
//! Every operation appends one node holding its forward value and the data
//! its backward rule needs. Nodes are only ever appended, so the tape is in
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.

use super::array::{lit, numel, Array, Scalar};
use super::kernels;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rules that can be deliberately corrupted to exercise gradient
/// checking as a negative control.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Tanh,
    Silu,
    RmsNorm,
    MatMul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BmmTn(Var, Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Tanh(Var),
    Silu(Var),
    Softmax { input: Var, axis: usize },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Mean(Var),
    RmsNorm { x: Var, weight: Var, inv_rms: Vec<T> },
    ScaleRows(Var, Var),
    Repeat { input: Var, n: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { input: Var, heads: usize, seq: usize },
    Attention(Box<AttentionSaved<T>>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    seq: usize,
    probs: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    corrupt: Option<Rule>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Array<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Array<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Broadcast compatibility: equal shapes, a one-element operand, or the
/// smaller shape being a trailing suffix of the larger.
fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    big == small
        || numel(small) == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt: None,
        }
    }

    /// Makes one backward rule return a scaled (wrong) gradient.
    #[doc(hidden)]
    pub fn corrupt_rule(&mut self, rule: Rule) {
        self.corrupt = Some(rule);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, input: Var, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        let needs = self.needs(input);
        let value = Array::new(shape, data).expect("unary output shape");
        self.push(value, op, needs)
    }

    /// Leaf node; differentiable when the array's `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    pub fn param(&mut self, value: Array<T>) -> Var {
        self.leaf(value.with_grad(true))
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value.with_grad(false))
    }

    fn binary_shapes(&self, op: &str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcastable(sa, sb) && numel(sa) >= numel(sb) {
            Ok((a, b))
        } else if broadcastable(sb, sa) {
            Ok((b, a))
        } else {
            Err(Error::dim(format!(
                "{op}: shapes {sa:?} and {sb:?} are not broadcast compatible"
            )))
        }
    }

    /// Elementwise sum with restricted broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.binary_shapes("add", a, b)?;
        let bd = self.data(big);
        let sd = self.data(small);
        let n = sd.len();
        let data: Vec<T> = if n == 1 {
            bd.iter().map(|&x| x + sd[0]).collect()
        } else {
            bd.iter()
                .zip(sd.iter().cycle())
                .map(|(&x, &y)| x + y)
                .collect()
        };
        let shape = self.shape(big).to_vec();
        let needs = self.needs(big) || self.needs(small);
        Ok(self.push(Array::new(shape, data)?, Op::Add(big, small), needs))
    }

    /// Elementwise product with restricted broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.binary_shapes("mul", a, b)?;
        let bd = self.data(big);
        let sd = self.data(small);
        let data: Vec<T> = if sd.len() == 1 {
            bd.iter().map(|&x| x * sd[0]).collect()
        } else {
            bd.iter()
                .zip(sd.iter().cycle())
                .map(|(&x, &y)| x * y)
                .collect()
        };
        let shape = self.shape(big).to_vec();
        let needs = self.needs(big) || self.needs(small);
        Ok(self.push(Array::new(shape, data)?, Op::Mul(big, small), needs))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_unary(a, shape, data, Op::Scale(a, c))
    }

    /// Matrix product. `a` may carry leading axes, which are folded into rows:
    /// `[..., q] × [q, r] -> [..., r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let q = sb[0];
        let r = sb[1];
        let p = numel(sa) / q;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = r;
        let data = kernels::matmul(self.data(a), self.data(b), p, q, r);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(shape, data)?, Op::MatMul(a, b), needs))
    }

    /// Batched `aᵀ·b`: `[B|1, n, c]ᵀ × [B, n, w] -> [B, c, w]`. A batch extent of
    /// one on `a` is shared across every batch entry of `b`.
    pub fn bmm_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[1] == sb[1]
            && (sa[0] == sb[0] || sa[0] == 1);
        if !ok {
            return Err(Error::dim(format!(
                "bmm_tn: cannot contract {sa:?} with {sb:?}"
            )));
        }
        let (batch, n, c, w) = (sb[0], sb[1], sa[2], sb[2]);
        let shared = sa[0] == 1;
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); batch * c * w];
        for bi in 0..batch {
            let ab = if shared { 0 } else { bi * n * c };
            let brows = &bd[bi * n * w..(bi + 1) * n * w];
            let orows = &mut out[bi * c * w..(bi + 1) * c * w];
            for j in 0..c {
                let orow = &mut orows[j * w..(j + 1) * w];
                for i in 0..n {
                    let coef = ad[ab + i * c + j];
                    let brow = &brows[i * w..(i + 1) * w];
                    for (o, &x) in orow.iter_mut().zip(brow) {
                        *o += coef * x;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(vec![batch, c, w], out)?, Op::BmmTn(a, b), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.contains(&0) || numel(&shape) != numel(self.shape(a)) {
            return Err(Error::dim(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        Ok(self.push_unary(a, shape, data, Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat: {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let chunk = ext * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Array::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice: range {start}..{} invalid on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push_unary(
            a,
            out_shape,
            data,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push_unary(a, shape, data, Op::Tanh(a))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| x / (T::one() + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_unary(a, shape, data, Op::Silu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * ext * inner + k * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..ext {
                    mx = mx.max(src[idx(k)]);
                }
                let mut z = T::zero();
                for k in 0..ext {
                    let e = (src[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..ext {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        Ok(self.push_unary(a, shape, out, Op::Softmax { input: a, axis }))
    }

    /// Sum of every element, as a one-element array.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.data(a) {
            s += x;
        }
        self.push_unary(a, vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.data(a) {
            s += x;
        }
        let n = lit::<T>(self.data(a).len() as f64);
        self.push_unary(a, vec![1], vec![s / n], Op::Mean(a))
    }

    /// Sum over one axis (sum pooling); the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..ext {
                let row = &src[(o * ext + k) * inner..(o * ext + k + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &e)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push_unary(a, out_shape, out, Op::SumAxis { input: a, axis }))
    }

    /// `x / sqrt(mean(x²) + eps) * weight` along the last axis.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap_or(&0);
        if k == 0 || self.shape(weight) != [k] {
            return Err(Error::dim(format!(
                "rms_norm: weight {:?} does not match last axis of {shape:?}",
                self.shape(weight)
            )));
        }
        let xd = self.data(x);
        let wd = self.data(weight);
        let rows = xd.len() / k;
        let kf = lit::<T>(k as f64);
        let eps = lit::<T>(eps);
        let mut out = vec![T::zero(); xd.len()];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let mut ss = T::zero();
            for &v in row {
                ss += v * v;
            }
            let ir = T::one() / (ss / kf + eps).sqrt();
            inv.push(ir);
            for ((o, &v), &w) in out[r * k..(r + 1) * k].iter_mut().zip(row).zip(wd) {
                *o = v * ir * w;
            }
        }
        let needs = self.needs(x) || self.needs(weight);
        Ok(self.push(
            Array::new(shape, out)?,
            Op::RmsNorm {
                x,
                weight,
                inv_rms: inv,
            },
            needs,
        ))
    }

    /// Multiplies every last-axis row of `x` by the matching scalar of `s`.
    /// The shape of `s` is `x`'s shape without the last axis, or a trailing
    /// part of it that is repeated over the leading axes.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(s);
        if sx.len() < 2 || ss.len() > sx.len() - 1 || ss != &sx[sx.len() - 1 - ss.len()..sx.len() - 1] {
            return Err(Error::dim(format!(
                "scale_rows: scales {ss:?} do not index the rows of {sx:?}"
            )));
        }
        let w = sx[sx.len() - 1];
        let xd = self.data(x);
        let sd = self.data(s);
        let mut out = Vec::with_capacity(xd.len());
        for (row, &c) in xd.chunks_exact(w).zip(sd.iter().cycle()) {
            out.extend(row.iter().map(|&v| v * c));
        }
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Array::new(sx, out)?, Op::ScaleRows(x, s), needs))
    }

    /// `[N, d] -> [N, n, d]` with `n` identical copies of each row.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || n == 0 {
            return Err(Error::dim(format!(
                "repeat_rows: need a rank-2 input and n >= 1, got {shape:?} and n={n}"
            )));
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * n * d);
        for r in 0..rows {
            for _ in 0..n {
                out.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        Ok(self.push_unary(a, vec![rows, n, d], out, Op::Repeat { input: a, n }))
    }

    /// Row lookup into `table[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("embedding: table must be rank 2, got {shape:?}")));
        }
        if ids.is_empty() {
            return Err(Error::input("embedding: empty token sequence"));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push_unary(
            table,
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position encoding on `[batch*seq, heads*head_dim]` rows, with
    /// positions counted within each sequence of length `seq`.
    pub fn rope(&mut self, a: Var, heads: usize, seq: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let rows = numel(&shape) / d;
        if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) || seq == 0 || !rows.is_multiple_of(seq) {
            return Err(Error::dim(format!(
                "rope: {shape:?} cannot be split into {heads} heads of even width over sequences of {seq}"
            )));
        }
        let table = rope_table::<T>(seq, d / heads);
        let out = rope_apply(self.data(a), &table, heads, seq, d, false);
        Ok(self.push_unary(a, shape, out, Op::Rope { input: a, heads, seq }))
    }

    /// Causal multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch*seq, heads*head_dim]`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?} must share one rank-2 shape",
                shape,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (rows, d) = (shape[0], shape[1]);
        if seq == 0 || rows == 0 {
            return Err(Error::input("attention: empty sequence"));
        }
        if heads == 0 || d % heads != 0 || rows % seq != 0 {
            return Err(Error::dim(format!(
                "attention: width {d} / {heads} heads or {rows} rows / seq {seq} does not divide"
            )));
        }
        let batch = rows / seq;
        let hd = d / heads;
        let scale = lit::<T>(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let qh = gather_head(qd, b, h, seq, d, hd);
                let kh = gather_head(kd, b, h, seq, d, hd);
                let vh = gather_head(vd, b, h, seq, d, hd);
                let mut scores = kernels::matmul_nt(&qh, &kh, seq, hd, seq);
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let row = &mut scores[i * seq..(i + 1) * seq];
                    let mut mx = T::neg_infinity();
                    for &s in &row[..=i] {
                        mx = mx.max(s * scale);
                    }
                    let mut z = T::zero();
                    for j in 0..=i {
                        let e = (row[j] * scale - mx).exp();
                        p[i * seq + j] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        p[i * seq + j] = p[i * seq + j] / z;
                    }
                }
                let oh = kernels::matmul(p, &vh, seq, seq, hd);
                scatter_head(&mut out, &oh, b, h, seq, d, hd);
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Array::new(shape, out)?,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                batch,
                seq,
                probs,
            })),
            needs,
        ))
    }

    /// Mean next-token cross-entropy in nats of `logits[N, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::contract(format!(
                "cross_entropy: logits {shape:?} not aligned with {} targets",
                targets.len()
            )));
        }
        let (n, v) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::input(format!(
                "target id {bad} out of range for vocabulary of {v}"
            )));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                let e = (x - mx).exp();
                *p = e;
                z += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            total += mx + z.ln() - row[t];
        }
        let loss = total / lit::<T>(n as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Array::new(vec![1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from a one-element `loss`. Every differentiable leaf gets
    /// a gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.needs_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Array::new(node.value.shape().to_vec(), g).expect("grad shape"),
                    None => Array::zeros(node.value.shape().to_vec()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn corrupted(&self, rule: Rule, g: &mut [T]) {
        if self.corrupt == Some(rule) {
            let f = lit::<T>(1.1);
            for x in g {
                *x *= f;
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(big, small) => {
                if self.needs(*big) {
                    accumulate(grads, *big, g.to_vec());
                }
                if self.needs(*small) {
                    accumulate(grads, *small, reduce_to(g, self.data(*small).len(), None));
                }
            }
            Op::Mul(big, small) => {
                let (bd, sd) = (self.data(*big), self.data(*small));
                if self.needs(*big) {
                    let gb = if sd.len() == 1 {
                        g.iter().map(|&x| x * sd[0]).collect()
                    } else {
                        g.iter().zip(sd.iter().cycle()).map(|(&x, &y)| x * y).collect()
                    };
                    accumulate(grads, *big, gb);
                }
                if self.needs(*small) {
                    accumulate(grads, *small, reduce_to(g, sd.len(), Some(bd)));
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (q, r) = (sb[0], sb[1]);
                let p = g.len() / r;
                if self.needs(*a) {
                    let mut ga = kernels::matmul_nt(g, self.data(*b), p, r, q);
                    self.corrupted(Rule::MatMul, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_tn(self.data(*a), g, q, p, r);
                    accumulate(grads, *b, gb);
                }
            }
            Op::BmmTn(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (batch, n, c, w) = (sb[0], sb[1], sa[2], sb[2]);
                let shared = sa[0] == 1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); ad.len()];
                    for bi in 0..batch {
                        let ab = if shared { 0 } else { bi * n * c };
                        for i in 0..n {
                            let brow = &bd[(bi * n + i) * w..(bi * n + i + 1) * w];
                            for j in 0..c {
                                let grow = &g[(bi * c + j) * w..(bi * c + j + 1) * w];
                                let mut s = T::zero();
                                for (&x, &y) in grow.iter().zip(brow) {
                                    s += x * y;
                                }
                                ga[ab + i * c + j] += s;
                            }
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bd.len()];
                    for bi in 0..batch {
                        let ab = if shared { 0 } else { bi * n * c };
                        for i in 0..n {
                            let dst = &mut gb[(bi * n + i) * w..(bi * n + i + 1) * w];
                            for j in 0..c {
                                let coef = ad[ab + i * c + j];
                                let grow = &g[(bi * c + j) * w..(bi * c + j + 1) * w];
                                for (d, &x) in dst.iter_mut().zip(grow) {
                                    *d += coef * x;
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(grads, v, gv);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, ext, inner) = axis_split(self.shape(*input), *axis);
                let len = node.value.shape()[*axis];
                let mut gi = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *input, gi);
            }
            Op::Tanh(a) => {
                let mut ga: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&x, &y)| x * (T::one() - y * y))
                    .collect();
                self.corrupted(Rule::Tanh, &mut ga);
                accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let xd = self.data(*a);
                let mut ga: Vec<T> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.corrupted(Rule::Silu, &mut ga);
                accumulate(grads, *a, ga);
            }
            Op::Softmax { input, axis } => {
                let (outer, ext, inner) = axis_split(node.value.shape(), *axis);
                let mut ga = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * ext * inner + k * inner + i;
                        let mut dot = T::zero();
                        for k in 0..ext {
                            dot += g[idx(k)] * out[idx(k)];
                        }
                        for k in 0..ext {
                            ga[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *input, ga);
            }
            Op::Sum(a) => {
                let n = self.data(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.data(*a).len();
                accumulate(grads, *a, vec![g[0] / lit::<T>(n as f64); n]);
            }
            Op::SumAxis { input, axis } => {
                let (outer, ext, inner) = axis_split(self.shape(*input), *axis);
                let mut gi = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    for _ in 0..ext {
                        gi.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let xd = self.data(*x);
                let wd = self.data(*weight);
                let k = wd.len();
                let kf = lit::<T>(k as f64);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); xd.len()];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let row = &xd[r * k..(r + 1) * k];
                        let grow = &g[r * k..(r + 1) * k];
                        let mut dot = T::zero();
                        for j in 0..k {
                            dot += grow[j] * wd[j] * row[j] * ir;
                        }
                        let m = dot / kf;
                        for j in 0..k {
                            gx[r * k + j] = ir * (grow[j] * wd[j] - row[j] * ir * m);
                        }
                    }
                    self.corrupted(Rule::RmsNorm, &mut gx);
                    accumulate(grads, *x, gx);
                }
                if self.needs(*weight) {
                    let mut gw = vec![T::zero(); k];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..k {
                            gw[j] += g[r * k + j] * xd[r * k + j] * ir;
                        }
                    }
                    accumulate(grads, *weight, gw);
                }
            }
            Op::ScaleRows(x, s) => {
                let w = *node.value.shape().last().unwrap();
                let (xd, sd) = (self.data(*x), self.data(*s));
                if self.needs(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for (grow, &c) in g.chunks_exact(w).zip(sd.iter().cycle()) {
                        gx.extend(grow.iter().map(|&v| v * c));
                    }
                    accumulate(grads, *x, gx);
                }
                if self.needs(*s) {
                    let mut gs = vec![T::zero(); sd.len()];
                    for (r, (grow, xrow)) in g.chunks_exact(w).zip(xd.chunks_exact(w)).enumerate() {
                        let mut acc = T::zero();
                        for (&a, &b) in grow.iter().zip(xrow) {
                            acc += a * b;
                        }
                        gs[r % sd.len()] += acc;
                    }
                    accumulate(grads, *s, gs);
                }
            }
            Op::Repeat { input, n } => {
                let d = self.shape(*input)[1];
                let rows = self.shape(*input)[0];
                let mut gi = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let dst = &mut gi[r * d..(r + 1) * d];
                    for c in 0..*n {
                        let src = &g[(r * n + c) * d..(r * n + c + 1) * d];
                        for (o, &x) in dst.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut gt = vec![T::zero(); shape[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &x) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Rope { input, heads, seq } => {
                let d = *node.value.shape().last().unwrap();
                let table = rope_table::<T>(*seq, d / heads);
                accumulate(grads, *input, rope_apply(g, &table, *heads, *seq, d, true));
            }
            Op::Attention(saved) => self.attention_backward(saved, node.value.shape(), g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let n = targets.len();
                let c = g[0] / lit::<T>(n as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * c).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= c;
                }
                accumulate(grads, *logits, gl);
            }
        }
    }

    fn attention_backward(
        &self,
        s: &AttentionSaved<T>,
        shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = shape[1];
        let (heads, batch, seq) = (s.heads, s.batch, s.seq);
        let hd = d / heads;
        let scale = lit::<T>(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (self.data(s.q), self.data(s.k), self.data(s.v));
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        for b in 0..batch {
            for h in 0..heads {
                let p = &s.probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let goh = gather_head(g, b, h, seq, d, hd);
                let qh = gather_head(qd, b, h, seq, d, hd);
                let kh = gather_head(kd, b, h, seq, d, hd);
                let vh = gather_head(vd, b, h, seq, d, hd);
                let gvh = kernels::matmul_tn(p, &goh, seq, seq, hd);
                let gp = kernels::matmul_nt(&goh, &vh, seq, hd, seq);
                let mut gs = vec![T::zero(); seq * seq];
                for i in 0..seq {
                    let mut dot = T::zero();
                    for j in 0..=i {
                        dot += p[i * seq + j] * gp[i * seq + j];
                    }
                    for j in 0..=i {
                        gs[i * seq + j] = p[i * seq + j] * (gp[i * seq + j] - dot) * scale;
                    }
                }
                let gqh = kernels::matmul(&gs, &kh, seq, seq, hd);
                let gkh = kernels::matmul_tn(&gs, &qh, seq, seq, hd);
                scatter_head(&mut gq, &gqh, b, h, seq, d, hd);
                scatter_head(&mut gk, &gkh, b, h, seq, d, hd);
                scatter_head(&mut gv, &gvh, b, h, seq, d, hd);
            }
        }
        if self.needs(s.q) {
            accumulate(grads, s.q, gq);
        }
        if self.needs(s.k) {
            accumulate(grads, s.k, gk);
        }
        if self.needs(s.v) {
            accumulate(grads, s.v, gv);
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` (optionally multiplied by `other`) down to a broadcast operand of
/// `n` elements.
fn reduce_to<T: Scalar>(g: &[T], n: usize, other: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    match other {
        Some(o) => {
            for (gr, or) in g.chunks_exact(n).zip(o.chunks_exact(n)) {
                for ((e, &x), &y) in out.iter_mut().zip(gr).zip(or) {
                    *e += x * y;
                }
            }
        }
        None => {
            for gr in g.chunks_exact(n) {
                for (e, &x) in out.iter_mut().zip(gr) {
                    *e += x;
                }
            }
        }
    }
    out
}

fn gather_head<T: Scalar>(x: &[T], b: usize, h: usize, seq: usize, d: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(seq * hd);
    for s in 0..seq {
        let base = (b * seq + s) * d + h * hd;
        out.extend_from_slice(&x[base..base + hd]);
    }
    out
}

fn scatter_head<T: Scalar>(
    x: &mut [T],
    src: &[T],
    b: usize,
    h: usize,
    seq: usize,
    d: usize,
    hd: usize,
) {
    for s in 0..seq {
        let base = (b * seq + s) * d + h * hd;
        x[base..base + hd].copy_from_slice(&src[s * hd..(s + 1) * hd]);
    }
}

const ROPE_BASE: f64 = 10_000.0;

/// `(cos, sin)` per position and rotation pair.
fn rope_table<T: Scalar>(seq: usize, hd: usize) -> Vec<(T, T)> {
    let half = hd / 2;
    let mut out = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-((2 * i) as f64) / hd as f64);
            let angle = pos as f64 * freq;
            out.push((lit(angle.cos()), lit(angle.sin())));
        }
    }
    out
}

fn rope_apply<T: Scalar>(
    x: &[T],
    table: &[(T, T)],
    heads: usize,
    seq: usize,
    d: usize,
    inverse: bool,
) -> Vec<T> {
    let hd = d / heads;
    let half = hd / 2;
    let mut out = vec![T::zero(); x.len()];
    for (row, (src, dst)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let pos = row % seq;
        for h in 0..heads {
            for i in 0..half {
                let (c, s) = table[pos * half + i];
                let s = if inverse { -s } else { s };
                let j = h * hd + 2 * i;
                let (x0, x1) = (src[j], src[j + 1]);
                dst[j] = x0 * c - x1 * s;
                dst[j + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}
