use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    /// Value with no gradient path, including ops whose inputs were all constant.
    Constant,
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Scale(NodeId, S),
    Sum(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Conv1d {
        x: NodeId,
        kernel: NodeId,
    },
    Mse(NodeId, NodeId),
    MaskedMse {
        a: NodeId,
        b: NodeId,
        mask: Vec<S>,
        count: S,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    RepeatRows {
        x: NodeId,
        counts: Vec<usize>,
    },
    PadStack {
        items: Vec<NodeId>,
        max_rows: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Append-only computation tape.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// the reverse pass is a single sweep from the loss back to index 0. Ops whose
/// inputs are all constant are stored as constants and never visited by
/// [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by one reverse pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Writes the gradient of `id` into `tensor.grad` (zeros when unreached).
    pub fn populate(&self, id: NodeId, tensor: &mut Tensor<S>) {
        let g = match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); tensor.len()],
        };
        tensor.grad = Some(g);
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(op, a, b)),
        })
        .collect()
}

/// Maps every flat index of `out` to the flat index of a same-rank operand whose
/// size-1 axes are stretched.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    if out == src {
        return (0..src.iter().product()).collect();
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if src[ax] == 1 { 0 } else { acc };
        acc *= src[ax];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        idx.push(flat);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            flat += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// How a same-rank operand is read while iterating over the output.
enum Broadcast {
    Same,
    /// Operand is a single trailing row of width `n`: index `o % n`.
    Row(usize),
    /// Operand has a size-1 last axis against output width `w`: index `o / w`.
    Column(usize),
    General(Vec<usize>),
}

impl Broadcast {
    fn new(out: &[usize], src: &[usize]) -> Self {
        let rank = out.len();
        if out == src {
            return Broadcast::Same;
        }
        let last = rank - 1;
        if src[..last].iter().all(|&d| d == 1) && src[last] == out[last] {
            return Broadcast::Row(out[last]);
        }
        if src[last] == 1 && src[..last] == out[..last] {
            return Broadcast::Column(out[last]);
        }
        Broadcast::General(broadcast_index(out, src))
    }

    #[inline]
    fn at(&self, o: usize) -> usize {
        match self {
            Broadcast::Same => o,
            Broadcast::Row(n) => o % n,
            Broadcast::Column(w) => o / w,
            Broadcast::General(idx) => idx[o],
        }
    }
}

fn transposed<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
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

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// Inserts a tensor as a leaf; it participates in backward iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<S>) -> NodeId {
        tensor.grad = None;
        let op = if tensor.requires_grad {
            Op::Leaf
        } else {
            Op::Constant
        };
        self.push_raw(op, tensor)
    }

    pub fn constant(&mut self, mut tensor: Tensor<S>) -> NodeId {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> NodeId {
        self.leaf(tensor.with_grad())
    }

    fn push_raw(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<S>, inputs: &[NodeId], shape: Vec<usize>, data: Vec<S>) -> NodeId {
        let requires = inputs.iter().any(|&i| self.requires_grad(i));
        let mut value = Tensor::new(shape, data).expect("op produced consistent shape");
        value.requires_grad = requires;
        let op = if requires { op } else { Op::Constant };
        self.push_raw(op, value)
    }

    fn data(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].value.data()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), &[a, b], vec![m, n], out))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let out = if self.shape(a) == self.shape(b) {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = Broadcast::new(&shape, self.shape(a));
            let ib = Broadcast::new(&shape, self.shape(b));
            let total: usize = shape.iter().product();
            (0..total).map(|o| f(da[ia.at(o)], db[ib.at(o)])).collect()
        };
        Ok(self.push(op, &[a, b], shape, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.data(x).iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), &[x], shape, out)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.data(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Exp(x), &[x], shape, out)
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let out = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), &[x], shape, out)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.data(x).iter().copied().sum();
        self.push(Op::Sum(x), &[x], vec![1], vec![total])
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(Op::Softmax(x), &[x], shape, out)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length `d`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let eps = S::lit(LAYER_NORM_EPS);
        let dn = S::from_usize(d);
        let xs = self.data(x);
        let (gs, bs) = (self.data(gain), self.data(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![S::zero(); xs.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gs[c] + bs[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(op, &[x, gain, bias], shape, out))
    }

    /// Length-preserving 1-D convolution over time with zero padding.
    ///
    /// `x` is `[T, c_in]`, `kernel` is `[k, c_in, c_out]` with odd `k`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sk.len() != 3 || sx.len() != 2 || sx[1] != sk[1] {
            return Err(Error::dim("conv1d", sx, sk));
        }
        let (t_len, c_in, k, c_out) = (sx[0], sx[1], sk[0], sk[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {k}")));
        }
        let pad = (k - 1) / 2;
        let (xs, ks) = (self.data(x), self.data(kernel));
        let mut out = vec![S::zero(); t_len * c_out];
        for t in 0..t_len {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xrow = &xs[(src - pad) * c_in..(src - pad + 1) * c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == S::zero() {
                        continue;
                    }
                    let krow = &ks[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        Ok(self.push(Op::Conv1d { x, kernel }, &[x, kernel], vec![t_len, c_out], out))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mse", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let n = S::from_usize(da.len());
        let total: S = da.iter().zip(db).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Op::Mse(a, b), &[a, b], vec![1], vec![total / n]))
    }

    /// Mean squared difference over the cells where `mask` is non-zero.
    ///
    /// `mask` must have the rank of `a`; size-1 axes stretch. Weighted by the
    /// mask values, normalized by the sum of the expanded mask.
    pub fn masked_mse(&mut self, a: NodeId, b: NodeId, mask: &Tensor<S>) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("masked_mse", self.shape(a), self.shape(b)));
        }
        let shape = self.shape(a).to_vec();
        if broadcast_shape("masked_mse", &shape, mask.shape())? != shape {
            return Err(Error::dim("masked_mse", &shape, mask.shape()));
        }
        let mask: Vec<S> = broadcast_index(&shape, mask.shape())
            .into_iter()
            .map(|i| mask.data()[i])
            .collect();
        let count: S = mask.iter().copied().sum();
        if count <= S::zero() {
            return Err(Error::Input("masked_mse over an all-padding mask".into()));
        }
        let (da, db) = (self.data(a), self.data(b));
        let total: S = da
            .iter()
            .zip(db)
            .zip(&mask)
            .map(|((&x, &y), &m)| m * (x - y) * (x - y))
            .sum();
        let op = Op::MaskedMse { a, b, mask, count };
        Ok(self.push(op, &[a, b], vec![1], vec![total / count]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let xs = self.data(x);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(x), &[x], vec![c, r], out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Op::Reshape(x), &[x], shape, data))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::dim("slice_cols", s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, &[x], vec![r, len], out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), parts, vec![rows, total], out))
    }

    /// Embedding lookup: rows `ids` of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("row id {bad} out of range for table of {v}")));
        }
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        let ts = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&ts[i * d..(i + 1) * d]);
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(op, &[table], vec![ids.len(), d], out))
    }

    /// Repeats row `i` of `x` `counts[i]` times, preserving order.
    pub fn repeat_rows(&mut self, x: NodeId, counts: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != counts.len() {
            return Err(Error::dim("repeat_rows", &s, &[counts.len()]));
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyOutput);
        }
        let width: usize = s[1..].iter().product();
        let xs = self.data(x);
        let mut out = Vec::with_capacity(total * width);
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.extend_from_slice(&xs[i * width..(i + 1) * width]);
            }
        }
        let mut shape = s;
        shape[0] = total;
        let op = Op::RepeatRows {
            x,
            counts: counts.to_vec(),
        };
        Ok(self.push(op, &[x], shape, out))
    }

    /// Stacks items of shape `[r_i, rest..]` into `[B, max_rows, rest..]`,
    /// zero-filling rows beyond each item's length.
    pub fn pad_stack(&mut self, items: &[NodeId], max_rows: usize) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::Input("pad_stack with no items".into()));
        }
        let rest = self.shape(items[0])[1..].to_vec();
        let width: usize = rest.iter().product();
        let mut out = vec![S::zero(); items.len() * max_rows * width];
        for (b, &it) in items.iter().enumerate() {
            let s = self.shape(it);
            if s[1..] != rest[..] || s[0] > max_rows {
                return Err(Error::dim("pad_stack", self.shape(items[0]), s));
            }
            let src = self.data(it);
            let dst = b * max_rows * width;
            out[dst..dst + src.len()].copy_from_slice(src);
        }
        let mut shape = vec![items.len(), max_rows];
        shape.extend(rest);
        let op = Op::PadStack {
            items: items.to_vec(),
            max_rows,
        };
        Ok(self.push(op, items, shape, out))
    }

    /// Inverted dropout with a mask drawn from `seed`; identity when `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> NodeId {
        if rate <= 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = S::lit(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Dropout { x, mask }, &[x], shape, out)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Does not mutate the graph, so repeated calls give bit-identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.propagate(i, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: NodeId, f: impl FnOnce(&mut [S])) {
        if !self.requires_grad(id) {
            return;
        }
        let len = self.value(id).len();
        let slot = grads[id.0].get_or_insert_with(|| vec![S::zero(); len]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    let bt = transposed(db, k, n);
                    matmul_into(g, &bt, ga, m, n, k);
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = da[r * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let ia = Broadcast::new(out_shape, self.shape(*a));
                let ib = Broadcast::new(out_shape, self.shape(*b));
                let (da, db) = (self.data(*a), self.data(*b));
                let is_mul = matches!(node.op, Op::Mul(..));
                let is_sub = matches!(node.op, Op::Sub(..));
                self.accumulate(grads, *a, |ga| match (&ia, is_mul) {
                    (Broadcast::Same, false) => {
                        ga.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv);
                    }
                    (_, false) => (0..g.len()).for_each(|o| ga[ia.at(o)] += g[o]),
                    (_, true) => (0..g.len()).for_each(|o| ga[ia.at(o)] += g[o] * db[ib.at(o)]),
                });
                self.accumulate(grads, *b, |gb| {
                    if is_mul {
                        (0..g.len()).for_each(|o| gb[ib.at(o)] += g[o] * da[ia.at(o)]);
                    } else if is_sub {
                        (0..g.len()).for_each(|o| gb[ib.at(o)] += -g[o]);
                    } else if let Broadcast::Same = ib {
                        gb.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv);
                    } else {
                        (0..g.len()).for_each(|o| gb[ib.at(o)] += g[o]);
                    }
                });
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &v), &gv) in gx.iter_mut().zip(xs).zip(g) {
                        if v > S::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let ys = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &y), &gv) in gx.iter_mut().zip(ys).zip(g) {
                        *o += gv * y;
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o += gv * *f;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Softmax(x) => {
                let ys = node.value.data();
                let n = *out_shape.last().unwrap();
                self.accumulate(grads, *x, |gx| {
                    for ((gr, yr), ox) in g.chunks(n).zip(ys.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &y) in ox.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap();
                let gs = self.data(*gain);
                let dn = S::from_usize(d);
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![S::zero(); d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let off = r * d;
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for c in 0..d {
                            dxhat[c] = g[off + c] * gs[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xhat[off + c];
                        }
                        for c in 0..d {
                            gx[off + c] +=
                                is / dn * (dn * dxhat[c] - sum_d - xhat[off + c] * sum_dx);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (o, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[o % d] += gv * h;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (o, &gv) in g.iter().enumerate() {
                        gb[o % d] += gv;
                    }
                });
            }
            Op::Conv1d { x, kernel } => {
                let (sx, sk) = (self.shape(*x), self.shape(*kernel));
                let (t_len, c_in, k, c_out) = (sx[0], sx[1], sk[0], sk[2]);
                let pad = (k - 1) / 2;
                let (xs, ks) = (self.data(*x), self.data(*kernel));
                let rows = |t: usize, j: usize| -> Option<usize> {
                    let src = t + j;
                    (src >= pad && src - pad < t_len).then(|| src - pad)
                };
                self.accumulate(grads, *x, |gx| {
                    // Per tap, kernel slices transposed to [c_out, c_in].
                    let kt: Vec<S> = (0..k)
                        .flat_map(|j| transposed(&ks[j * c_in * c_out..(j + 1) * c_in * c_out], c_in, c_out))
                        .collect();
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for j in 0..k {
                            let Some(s) = rows(t, j) else { continue };
                            let xrow = &mut gx[s * c_in..(s + 1) * c_in];
                            for (o, &gv) in grow.iter().enumerate() {
                                if gv == S::zero() {
                                    continue;
                                }
                                let off = (j * c_out + o) * c_in;
                                for (dst, &kv) in xrow.iter_mut().zip(&kt[off..off + c_in]) {
                                    *dst += gv * kv;
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *kernel, |gk| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for j in 0..k {
                            let Some(s) = rows(t, j) else { continue };
                            for c in 0..c_in {
                                let xv = xs[s * c_in + c];
                                let off = (j * c_in + c) * c_out;
                                for (o, &gv) in gk[off..off + c_out].iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let scale = S::lit(2.0) * g[0] / S::from_usize(da.len());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(da).zip(db) {
                        *o += scale * (x - y);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(da).zip(db) {
                        *o -= scale * (x - y);
                    }
                });
            }
            Op::MaskedMse { a, b, mask, count } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let scale = S::lit(2.0) * g[0] / *count;
                self.accumulate(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += scale * mask[i] * (da[i] - db[i]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, o) in gb.iter_mut().enumerate() {
                        *o -= scale * mask[i] * (da[i] - db[i]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (out_shape[1], out_shape[0]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) | Op::Dropout { x, .. } => {
                let mask = match &node.op {
                    Op::Dropout { mask, .. } => Some(mask),
                    _ => None,
                };
                self.accumulate(grads, *x, |gx| {
                    for (o, (idx, &gv)) in gx.iter_mut().zip(g.iter().enumerate()) {
                        *o += mask.map_or(gv, |m| gv * m[idx]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let (r, len) = (out_shape[0], out_shape[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out_shape[0], out_shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = out_shape[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::RepeatRows { x, counts } => {
                let width: usize = out_shape[1..].iter().product();
                self.accumulate(grads, *x, |gx| {
                    let mut src = 0;
                    for (i, &c) in counts.iter().enumerate() {
                        for _ in 0..c {
                            for j in 0..width {
                                gx[i * width + j] += g[src * width + j];
                            }
                            src += 1;
                        }
                    }
                });
            }
            Op::PadStack { items, max_rows } => {
                let width: usize = out_shape[2..].iter().product();
                for (b, &it) in items.iter().enumerate() {
                    let off = b * max_rows * width;
                    self.accumulate(grads, it, |gi| {
                        let n = gi.len();
                        for (o, &gv) in gi.iter_mut().zip(&g[off..off + n]) {
                            *o += gv;
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let ii = g.matmul(i, i).unwrap();
        assert_eq!(g.value(ii), &Tensor::<f64>::eye(2));

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
    }

    #[test]
    fn broadcast_size_one_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[1, 3], &[10., 20., 30.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
        let col = g.constant(t(&[2, 1], &[2., 3.]));
        let d = g.mul(a, col).unwrap();
        assert_eq!(g.value(d).data(), &[2., 4., 6., 12., 15., 18.]);
        let bad = g.constant(t(&[3], &[1., 1., 1.]));
        assert!(matches!(g.add(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0., 0.]));
        let s = g.softmax(a);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let big = g.constant(t(&[2], &[1000., 1000.]));
        let s = g.softmax(big);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3., 3., 3., 3.]));
        let gain = g.constant(Tensor::full([4], 1.0));
        let bias = g.constant(Tensor::zeros([4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[1, 4], &[1., -2., 5., 0.5]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 1], &[1., -2., 3., 7.]));
        let id = g.constant(t(&[3, 1, 1], &[0., 1., 0.]));
        let y = g.conv1d(x, id).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(t(&[3, 1], &[1., 1., 1.]));
        let k = g.constant(t(&[3, 1, 1], &[1., 1., 1.]));
        let y = g.conv1d(ones, k).unwrap();
        assert_eq!(g.value(y).data(), &[2., 3., 2.]);

        let even = g.constant(Tensor::zeros([2, 1, 1]));
        assert!(matches!(g.conv1d(ones, even), Err(Error::Config(_))));
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0., 0.]));
        let b = g.constant(t(&[2], &[2., 0.]));
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let z = g.mse(a, a).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        let c = g.constant(Tensor::zeros([3]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_inputs_are_not_recorded_as_ops() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let c = g.mul(a, b).unwrap();
        assert!(!g.requires_grad(c));
        assert!(matches!(g.nodes[c.0].op, Op::Constant));
    }

    #[test]
    fn length_regulation_drops_zero_rows() {
        let mut g = Graph::new();
        let h = g.param(t(&[3, 1], &[1., 2., 3.]));
        let r = g.repeat_rows(h, &[2, 0, 3]).unwrap();
        assert_eq!(g.value(r).data(), &[1., 1., 3., 3., 3.]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(h).unwrap(), &[2., 0., 3.]);
        assert!(matches!(g.repeat_rows(h, &[0, 0, 0]), Err(Error::EmptyOutput)));
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert_eq!(g.dropout(x, 0.0, 7), x);
        let d1 = g.dropout(x, 0.5, 7);
        let d2 = g.dropout(x, 0.5, 7);
        assert_eq!(g.value(d1), g.value(d2));
    }
}
