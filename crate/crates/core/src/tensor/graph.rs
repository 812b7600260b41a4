use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    Silu(Var),
    RmsNorm { x: Var, weight: Var, eps: T },
    Embedding { table: Var, ids: Vec<usize> },
    Slice { a: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Log(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Rope { a: Var, base: T },
    CausalMask(Var),
    GatherRows { a: Var, rows: Vec<usize> },
    ScatterAddRows { a: Var, rows: Vec<usize> },
    GatherElems { a: Var, index: Vec<usize> },
    MulRows { a: Var, s: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for backward. Leaf gradients accumulate across repeated
/// [`Graph::backward`] calls until [`Graph::zero_grad`]; intermediate
/// gradients are discarded once propagated.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn shapes<T: Real>(ts: &[&Tensor<T>]) -> String {
    ts.iter().map(|t| format!("{:?}", t.shape())).collect::<Vec<_>>().join(" vs ")
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---------------------------------------------------------------- forward

    /// `[.., m, k] x [k, n]` (rank-2 right operand, leading axes of the left
    /// operand folded into rows) or batched `[g, m, k] x [g, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() >= 2 && sb.len() == 2 {
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(Error::shape("matmul", shapes(&[ta, tb])));
            }
            let m = ta.numel() / k;
            let n = sb[1];
            let out = matmul_kernel(ta.data(), tb.data(), m, k, n);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let value = Tensor::raw(shape, out);
            Ok(self.derived(value, Op::MatMul { a, b, batched: false }, &[a, b]))
        } else if sa.len() == 3 && sb.len() == 3 {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::shape("matmul", shapes(&[ta, tb])));
            }
            let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = Vec::with_capacity(g * m * n);
            for i in 0..g {
                out.extend(matmul_kernel(
                    &ta.data()[i * m * k..(i + 1) * m * k],
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            let value = Tensor::raw(vec![g, m, n], out);
            Ok(self.derived(value, Op::MatMul { a, b, batched: true }, &[a, b]))
        } else {
            Err(Error::shape("matmul", shapes(&[ta, tb])))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", shapes(&[ta, tb])));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::raw(ta.shape().to_vec(), data);
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", shapes(&[ta, tb])));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::raw(ta.shape().to_vec(), data);
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.val(a).map(|x| x * c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    /// Softmax over the last axis with max subtraction. `-inf` entries are
    /// treated as masked (probability zero); NaN, `+inf`, or a fully masked row
    /// are numeric-domain errors.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let w = ta.last_dim();
        let mut out = vec![T::zero(); ta.numel()];
        for (row, dst) in ta.data().chunks(w).zip(out.chunks_mut(w)) {
            softmax_row(row, dst)?;
        }
        let value = Tensor::raw(ta.shape().to_vec(), out);
        Ok(self.derived(value, Op::Softmax(a), &[a]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| x * sigmoid(x));
        self.derived(value, Op::Silu(a), &[a])
    }

    /// `x / sqrt(mean(x^2) + eps) * weight` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: T) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(weight));
        let d = tx.last_dim();
        if tw.shape() != [d] {
            return Err(Error::shape("rmsnorm", shapes(&[tx, tw])));
        }
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let r = rms_inv(row, eps);
            out.extend(row.iter().zip(tw.data()).map(|(&v, &g)| v * r * g));
        }
        let value = Tensor::raw(tx.shape().to_vec(), out);
        Ok(self.derived(value, Op::RmsNorm { x, weight, eps }, &[x, weight]))
    }

    /// Rows of `table` (`[vocab, d]`) selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        if tt.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?} is not rank 2", tt.shape())));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} outside vocabulary {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::raw(vec![ids.len(), d], out);
        Ok(self.derived(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&ta.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::raw(shape, out);
        Ok(self.derived(value, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.val(*first).shape().to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.val(v).shape();
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s0:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.val(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::raw(shape, out);
        Ok(self.derived(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.val(a);
        let s = ta.shape();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("transpose", format!("permutation {perm:?} of {s:?}")));
        }
        let (shape, out) = permute(ta.data(), s, perm);
        let value = Tensor::raw(shape, out);
        Ok(self.derived(value, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a).clone().reshaped(shape)?;
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s: T = t.data().iter().copied().sum();
        let value = Tensor::scalar(s / T::lit(t.numel() as f64));
        self.derived(value, Op::Mean(a), &[a])
    }

    /// Column means of a `[n, e]` matrix, shaped `[e]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.rank() != 2 {
            return Err(Error::shape("mean", format!("row mean of {:?}", t.shape())));
        }
        let (n, e) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![T::zero(); e];
        for row in t.data().chunks(e) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.derived(Tensor::raw(vec![e], out), Op::MeanRows(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if let Some(bad) = t.data().iter().find(|x| !x.is_finite() || **x <= T::zero()) {
            return Err(Error::numeric("log", format!("argument {bad} outside (0, inf)")));
        }
        let value = t.map(|x| x.ln());
        Ok(self.derived(value, Op::Log(a), &[a]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; logits are `[n, vocab]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.val(logits);
        let v = t.last_dim();
        let n = t.numel() / v;
        if n != targets.len() {
            return Err(Error::shape(
                "cross-entropy",
                format!("{} targets for logits {:?}", targets.len(), t.shape()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&x| x >= v) {
            return Err(Error::shape("cross-entropy", format!("target {bad} outside vocabulary {v}")));
        }
        if !t.all_finite() {
            return Err(Error::numeric("cross-entropy", "non-finite logits"));
        }
        let mut total = T::zero();
        for (row, &y) in t.data().chunks(v).zip(targets) {
            total += logsumexp(row) - row[y];
        }
        let value = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.derived(value, Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Rotary position embedding over `[g, t, head_dim]`; the position of an
    /// element is its index on axis 1. Dimension `i` is paired with
    /// `i + head_dim / 2`.
    pub fn rope(&mut self, a: Var, base: T) -> Result<Var> {
        let t = self.val(a);
        let s = t.shape();
        if s.len() != 3 || s[2] % 2 != 0 {
            return Err(Error::shape("rope", format!("input {s:?} is not [g, t, even]")));
        }
        let out = rope_apply(t.data(), s, base, false);
        let value = Tensor::raw(s.to_vec(), out);
        Ok(self.derived(value, Op::Rope { a, base }, &[a]))
    }

    /// Sets entries above the diagonal of the trailing square matrices to -inf.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape("causal-mask", format!("{s:?} is not [.., t, t]")));
        }
        let n = s[s.len() - 1];
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            row[r % n + 1..].iter_mut().for_each(|x| *x = T::neg_infinity());
        }
        let value = Tensor::raw(s.to_vec(), out);
        Ok(self.derived(value, Op::CausalMask(a), &[a]))
    }

    /// Rows of a `[n, d]` matrix by index, shaped `[rows.len(), d]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.val(a);
        if t.rank() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(Error::shape("gather-rows", format!("rows {rows:?} of {:?}", t.shape())));
        }
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::raw(vec![rows.len(), d], out);
        Ok(self.derived(value, Op::GatherRows { a, rows: rows.to_vec() }, &[a]))
    }

    /// `out[rows[i]] += a[i]` into an `[n_out, d]` zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, rows: &[usize], n_out: usize) -> Result<Var> {
        let t = self.val(a);
        if t.rank() != 2 || t.shape()[0] != rows.len() || rows.iter().any(|&r| r >= n_out) {
            return Err(Error::shape(
                "scatter-add-rows",
                format!("{} rows into {n_out} from {:?}", rows.len(), t.shape()),
            ));
        }
        let d = t.shape()[1];
        let mut out = vec![T::zero(); n_out * d];
        for (i, &r) in rows.iter().enumerate() {
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        let value = Tensor::raw(vec![n_out, d], out);
        Ok(self.derived(value, Op::ScatterAddRows { a, rows: rows.to_vec() }, &[a]))
    }

    /// Elements by flat index, shaped `[index.len()]`.
    pub fn gather_elems(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.val(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::shape("gather", format!("flat index {bad} of {:?}", t.shape())));
        }
        let out = index.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::raw(vec![index.len()], out);
        Ok(self.derived(value, Op::GatherElems { a, index: index.to_vec() }, &[a]))
    }

    /// Scales row `i` of `[n, d]` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.val(a), self.val(s));
        if ta.rank() != 2 || ts.shape() != [ta.shape()[0]] {
            return Err(Error::shape("mul-rows", shapes(&[ta, ts])));
        }
        let d = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for (row, &c) in out.chunks_mut(d).zip(ts.data()) {
            row.iter_mut().for_each(|x| *x *= c);
        }
        let value = Tensor::raw(ta.shape().to_vec(), out);
        Ok(self.derived(value, Op::MulRows { a, s }, &[a, s]))
    }

    // --------------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// adds the result to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pass: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = pass[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut pass);
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            match &mut self.grads[idx] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], pass: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let slot = pass[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if *batched {
                    let (gn, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                    send(*a, &mut |da| {
                        for i in 0..gn {
                            matmul_grad_a(
                                &g[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                    send(*b, &mut |db| {
                        for i in 0..gn {
                            matmul_grad_b(
                                &g[i * m * n..(i + 1) * m * n],
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                } else {
                    let k = ta.last_dim();
                    let m = ta.numel() / k;
                    let n = tb.shape()[1];
                    send(*a, &mut |da| matmul_grad_a(g, tb.data(), da, m, k, n));
                    send(*b, &mut |db| matmul_grad_b(g, ta.data(), db, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, &mut |d| add_into(d, g));
                send(*b, &mut |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                send(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                });
                send(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &mut |d| {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d += g * *c;
                }
            }),
            Op::Softmax(a) => {
                let w = out.last_dim();
                send(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.data().chunks(w)) {
                        let gy = dot(gr, yr);
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - gy);
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let ta = self.val(*a);
                send(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                        let s = sigmoid(x);
                        *d += g * s * (T::one() + x * (T::one() - s));
                    }
                });
            }
            Op::RmsNorm { x, weight, eps } => {
                let (tx, tw) = (self.val(*x), self.val(*weight));
                let dim = tx.last_dim();
                let inv_d = T::one() / T::lit(dim as f64);
                send(*x, &mut |d| {
                    for ((dr, gr), xr) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(tx.data().chunks(dim)) {
                        let r = rms_inv(xr, *eps);
                        let dot: T = gr.iter().zip(tw.data()).zip(xr).map(|((&g, &w), &x)| g * w * x).sum();
                        let c = r * r * r * inv_d * dot;
                        for (((d, &g), &w), &x) in dr.iter_mut().zip(gr).zip(tw.data()).zip(xr) {
                            *d += r * g * w - c * x;
                        }
                    }
                });
                send(*weight, &mut |d| {
                    for (gr, xr) in g.chunks(dim).zip(tx.data().chunks(dim)) {
                        let r = rms_inv(xr, *eps);
                        for ((d, &g), &x) in d.iter_mut().zip(gr).zip(xr) {
                            *d += g * x * r;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = self.val(*table).shape()[1];
                send(*table, &mut |d| {
                    for (gr, &i) in g.chunks(dim).zip(ids) {
                        add_into(&mut d[i * dim..(i + 1) * dim], gr);
                    }
                });
            }
            Op::Slice { a, axis, start } => {
                let s = self.val(*a).shape();
                let len = out.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                send(*a, &mut |d| {
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let len = self.val(v).shape()[*axis];
                    send(v, &mut |d| {
                        for o in 0..outer {
                            let src = o * s[*axis] * inner + offset * inner;
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute(g, out.shape(), &inverse);
                send(*a, &mut |d| add_into(d, &back));
            }
            Op::Reshape(a) => send(*a, &mut |d| add_into(d, g)),
            Op::Sum(a) => send(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let c = g[0] / T::lit(self.val(*a).numel() as f64);
                send(*a, &mut |d| d.iter_mut().for_each(|d| *d += c));
            }
            Op::MeanRows(a) => {
                let t = self.val(*a);
                let (n, e) = (t.shape()[0], t.shape()[1]);
                let inv = T::one() / T::lit(n as f64);
                send(*a, &mut |d| {
                    for row in d.chunks_mut(e) {
                        for (d, &g) in row.iter_mut().zip(g) {
                            *d += g * inv;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let ta = self.val(*a);
                send(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += g / x;
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.val(*logits);
                let v = t.last_dim();
                let c = g[0] / T::lit(targets.len() as f64);
                send(*logits, &mut |d| {
                    let mut p = vec![T::zero(); v];
                    for ((dr, row), &y) in d.chunks_mut(v).zip(t.data().chunks(v)).zip(targets) {
                        softmax_row(row, &mut p).expect("validated in forward");
                        for (d, &p) in dr.iter_mut().zip(&p) {
                            *d += c * p;
                        }
                        dr[y] -= c;
                    }
                });
            }
            Op::Rope { a, base } => {
                let back = rope_apply(g, out.shape(), *base, true);
                send(*a, &mut |d| add_into(d, &back));
            }
            Op::CausalMask(a) => {
                let n = out.last_dim();
                send(*a, &mut |d| {
                    for (r, (dr, gr)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let keep = r % n + 1;
                        add_into(&mut dr[..keep], &gr[..keep]);
                    }
                });
            }
            Op::GatherRows { a, rows } => {
                let dim = out.last_dim();
                send(*a, &mut |d| {
                    for (gr, &r) in g.chunks(dim).zip(rows) {
                        add_into(&mut d[r * dim..(r + 1) * dim], gr);
                    }
                });
            }
            Op::ScatterAddRows { a, rows } => {
                let dim = out.last_dim();
                send(*a, &mut |d| {
                    for (dr, &r) in d.chunks_mut(dim).zip(rows) {
                        add_into(dr, &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::GatherElems { a, index } => send(*a, &mut |d| {
                for (&i, &g) in index.iter().zip(g) {
                    d[i] += g;
                }
            }),
            Op::MulRows { a, s } => {
                let (ta, ts) = (self.val(*a), self.val(*s));
                let dim = ta.last_dim();
                send(*a, &mut |d| {
                    for ((dr, gr), &c) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(ts.data()) {
                        for (d, &g) in dr.iter_mut().zip(gr) {
                            *d += g * c;
                        }
                    }
                });
                send(*s, &mut |d| {
                    for ((d, gr), xr) in d.iter_mut().zip(g.chunks(dim)).zip(ta.data().chunks(dim)) {
                        *d += dot(gr, xr);
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn rms_inv<T: Real>(row: &[T], eps: T) -> T {
    let ms: T = row.iter().map(|&v| v * v).sum::<T>() / T::lit(row.len() as f64);
    T::one() / (ms + eps).sqrt()
}

pub(crate) fn logsumexp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_row<T: Real>(row: &[T], dst: &mut [T]) -> Result<()> {
    if row.iter().any(|x| x.is_nan() || *x == T::infinity()) {
        return Err(Error::numeric("softmax", "NaN or +inf in input"));
    }
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return Err(Error::numeric("softmax", "every entry of a row is -inf"));
    }
    let mut z = T::zero();
    for (d, &x) in dst.iter_mut().zip(row) {
        *d = if x == T::neg_infinity() { T::zero() } else { (x - m).exp() };
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d /= z);
    Ok(())
}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(Strided::rows(a, k), Strided::rows(b, n), &mut out, m, k, n);
    out
}

/// `da += g . b^T`
fn matmul_grad_a<T: Real>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    gemm(Strided::rows(g, n), Strided::cols(b, n), da, m, n, k);
}

/// `db += a^T . g`
fn matmul_grad_b<T: Real>(g: &[T], a: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    gemm(Strided::cols(a, k), Strided::rows(g, n), db, k, m, n);
}

/// Read-only matrix view: element `(i, j)` sits at `i * row + j * col`.
#[derive(Clone, Copy)]
struct Strided<'a, T> {
    data: &'a [T],
    row: usize,
    col: usize,
}

impl<'a, T: Copy> Strided<'a, T> {
    /// Row-major storage with `width` columns.
    fn rows(data: &'a [T], width: usize) -> Self {
        Self { data, row: width, col: 1 }
    }

    /// Transpose of row-major storage with `width` columns.
    fn cols(data: &'a [T], width: usize) -> Self {
        Self { data, row: 1, col: width }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.row + j * self.col]
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m, n] += a[m, k] . b[k, n]` with `c` row-major.
///
/// Both operands are packed into zero-padded panels so the register tile
/// loop is branch-free. Each output element is accumulated in `k` order
/// starting from zero and then added to `c`.
fn gemm<T: Real>(a: Strided<'_, T>, b: Strided<'_, T>, c: &mut [T], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let nb = n.div_ceil(NR);
    let mut bp = vec![T::zero(); nb * k * NR];
    for jb in 0..nb {
        let panel = &mut bp[jb * k * NR..(jb + 1) * k * NR];
        let cols = NR.min(n - jb * NR);
        for p in 0..k {
            for j in 0..cols {
                panel[p * NR + j] = b.at(p, jb * NR + j);
            }
        }
    }
    let mut ap = vec![T::zero(); k * MR];
    for i0 in (0..m).step_by(MR) {
        let rows = MR.min(m - i0);
        if rows < MR {
            ap.fill(T::zero());
        }
        for p in 0..k {
            for i in 0..rows {
                ap[p * MR + i] = a.at(i0 + i, p);
            }
        }
        for jb in 0..nb {
            let panel = &bp[jb * k * NR..(jb + 1) * k * NR];
            let acc = micro_tile(&ap, panel);
            let j0 = jb * NR;
            let cols = NR.min(n - j0);
            for (i, acc_row) in acc.iter().enumerate().take(rows) {
                let crow = &mut c[(i0 + i) * n + j0..(i0 + i) * n + j0 + cols];
                for (o, &v) in crow.iter_mut().zip(acc_row) {
                    *o += v;
                }
            }
        }
    }
}

#[inline(always)]
fn micro_tile<T: Real>(ap: &[T], bp: &[T]) -> [[T; NR]; MR] {
    let mut acc = [[T::zero(); NR]; MR];
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for i in 0..MR {
            let x = av[i];
            for j in 0..NR {
                acc[i][j] += x * bv[j];
            }
        }
    }
    acc
}

fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    // Trailing axes left in place are copied as contiguous runs.
    let mut fixed = rank;
    while fixed > 0 && perm[fixed - 1] == fixed - 1 {
        fixed -= 1;
    }
    let run: usize = shape[fixed..].iter().product();
    let outer = fixed;
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; outer];
    for _ in 0..data.len() / run.max(1) {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&data[src..src + run]);
        for ax in (0..outer).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn rope_apply<T: Real>(data: &[T], shape: &[usize], base: T, inverse: bool) -> Vec<T> {
    let (t, hd) = (shape[1], shape[2]);
    let half = hd / 2;
    let mut out = data.to_vec();
    for (r, (src, dst)) in data.chunks(hd).zip(out.chunks_mut(hd)).enumerate() {
        let pos = T::lit((r % t) as f64);
        for i in 0..half {
            let freq = base.powf(-T::lit(2.0 * i as f64 / hd as f64));
            let (sin, cos) = (pos * freq).sin_cos();
            let sin = if inverse { -sin } else { sin };
            let (x0, x1) = (src[i], src[i + half]);
            dst[i] = x0 * cos - x1 * sin;
            dst[i + half] = x0 * sin + x1 * cos;
        }
    }
    out
}
