//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Forward calls record each primitive together with its input node ids; the
//! reverse pass walks the tape backwards accumulating adjoints in a fixed
//! order, so gradients are bit-reproducible for a given tape. Node values are
//! immutable once written, and a node only participates in the reverse pass
//! when some input transitively requires gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Gather { src: usize, ids: Vec<usize> },
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    RmsNorm { x: usize, gamma: usize, eps: T },
    Rope { x: usize, n_heads: usize },
    CausalSoftmax { scores: usize },
    SoftmaxRows { x: usize },
    Silu { x: usize },
    CosinePairs { a: usize, b: usize },
    GatherEntries { src: usize, index: Vec<(usize, usize)> },
    LogSumExpRows { x: usize },
    MeanAll { x: usize },
    SumAll { x: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to tape leaves.
pub struct Gradients<T: Scalar> {
    entries: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.entries.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.entries.get_mut(v.0).and_then(Option::take)
    }
}

/// Rotary position factors for one (position, pair) slot.
///
/// Shared by forward and backward so both see bit-identical trig values.
fn rope_angles(pos: usize, pair: usize, half: usize) -> (f64, f64) {
    let exponent = 2.0 * pair as f64 / (2.0 * half as f64);
    let theta = pos as f64 / 10000f64.powf(exponent);
    (theta.cos(), theta.sin())
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf; gradient participation follows the tensor's flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Insert a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.nodes[v.0].value.scalar_value()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    /// `a · bᵀ` for two row-major matrices sharing their column extent.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::MatmulNT { a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, rg))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul_elem(self.value(a), self.value(b))?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::MulElem { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = tensor::scale(self.value(a), factor)?;
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(value, Op::Scale { a: a.0, factor }, rg))
    }

    /// Row lookup by id (embedding gather).
    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let value = tensor::gather_rows(self.value(src), ids)?;
        let rg = self.needs_grad(&[src.0]);
        Ok(self.push(value, Op::Gather { src: src.0, ids: ids.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice_cols(self.value(src), start, len)?;
        let rg = self.needs_grad(&[src.0]);
        Ok(self.push(value, Op::SliceCols { src: src.0, start }, rg))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice_rows(self.value(src), start, len)?;
        let rg = self.needs_grad(&[src.0]);
        Ok(self.push(value, Op::SliceRows { src: src.0, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {r} vs {rows}"
                )));
            }
            total_cols += c;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new_unchecked(vec![rows, total_cols], data);
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(value, Op::ConcatCols { parts: ids }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {c} vs {cols}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new_unchecked(vec![rows, cols], data);
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(value, Op::ConcatRows { parts: ids }, rg))
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let value = tensor::rms_norm(self.value(x), self.value(gamma), eps)?;
        let rg = self.needs_grad(&[x.0, gamma.0]);
        Ok(self.push(value, Op::RmsNorm { x: x.0, gamma: gamma.0, eps }, rg))
    }

    /// Rotary position transform applied per head to a [seq × d_model] tensor.
    pub fn rope(&mut self, x: Var, n_heads: usize) -> Result<Var> {
        let (seq, d_model) = self.value(x).dims2()?;
        if n_heads == 0 || d_model % n_heads != 0 || (d_model / n_heads) % 2 != 0 {
            return Err(Error::Parameter(format!(
                "rope needs an even head size, got d_model {d_model} over {n_heads} heads"
            )));
        }
        let d_head = d_model / n_heads;
        let half = d_head / 2;
        let src = self.value(x).data();
        let mut out = src.to_vec();
        for pos in 0..seq {
            for h in 0..n_heads {
                for k in 0..half {
                    let (cos, sin) = rope_angles(pos, k, half);
                    let (cos, sin) = (T::from_f64(cos), T::from_f64(sin));
                    let c0 = pos * d_model + h * d_head + 2 * k;
                    let x0 = src[c0];
                    let x1 = src[c0 + 1];
                    out[c0] = x0 * cos - x1 * sin;
                    out[c0 + 1] = x0 * sin + x1 * cos;
                }
            }
        }
        let value = Tensor::new_unchecked(vec![seq, d_model], out);
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(value, Op::Rope { x: x.0, n_heads }, rg))
    }

    /// Softmax over the causal prefix of each row of a square score matrix:
    /// row `i` normalizes columns `0..=i`, later columns are zero.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let (r, c) = self.value(scores).dims2()?;
        if r != c {
            return Err(Error::Dimension(format!(
                "causal_softmax expects square scores, got {r}×{c}"
            )));
        }
        let src = self.value(scores).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..i * c + i + 1];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (j, &s) in row.iter().enumerate() {
                let e = (s - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * c + j] = out[i * c + j] / z;
            }
        }
        let value = Tensor::new_unchecked(vec![r, c], out);
        value.ensure_finite("causal_softmax")?;
        let rg = self.needs_grad(&[scores.0]);
        Ok(self.push(value, Op::CausalSoftmax { scores: scores.0 }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(x))?;
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(value, Op::SoftmaxRows { x: x.0 }, rg))
    }

    /// `x · sigmoid(x)` elementwise.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        value.ensure_finite("silu")?;
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(value, Op::Silu { x: x.0 }, rg))
    }

    /// Pairwise cosine similarities: `[m×d] × [k×d] → [m×k]`.
    pub fn cosine_pairs(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, da) = self.value(a).dims2()?;
        let (k, db) = self.value(b).dims2()?;
        if da != db {
            return Err(Error::Dimension(format!(
                "cosine_pairs dims differ: {da} vs {db}"
            )));
        }
        let (na, _) = row_norms(self.value(a))?;
        let (nb, _) = row_norms(self.value(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            for j in 0..k {
                let mut dot = T::zero();
                for t in 0..da {
                    dot += av[i * da + t] * bv[j * da + t];
                }
                out[i * k + j] = dot / (na[i] * nb[j]);
            }
        }
        let value = Tensor::new_unchecked(vec![m, k], out);
        value.ensure_finite("cosine_pairs")?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::CosinePairs { a: a.0, b: b.0 }, rg))
    }

    /// Arbitrary (row, col) entry selection reshaped to `rows × cols`.
    pub fn gather_entries(
        &mut self,
        src: Var,
        index: &[(usize, usize)],
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "gather_entries: {} indices cannot fill {rows}×{cols}",
                index.len()
            )));
        }
        let (sr, sc) = self.value(src).dims2()?;
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(index.len());
        for &(ri, ci) in index {
            if ri >= sr || ci >= sc {
                return Err(Error::Dimension(format!(
                    "gather_entries index ({ri},{ci}) out of range for {sr}×{sc}"
                )));
            }
            out.push(data[ri * sc + ci]);
        }
        let value = Tensor::new_unchecked(vec![rows, cols], out);
        let rg = self.needs_grad(&[src.0]);
        Ok(self.push(value, Op::GatherEntries { src: src.0, index: index.to_vec() }, rg))
    }

    /// Stabilized log-sum-exp of each row: `[m×c] → [m×1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z = row.iter().map(|&s| (s - m).exp()).sum::<T>();
            out.push(m + z.ln());
        }
        let value = Tensor::new_unchecked(vec![r, 1], out);
        value.ensure_finite("logsumexp_rows")?;
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(value, Op::LogSumExpRows { x: x.0 }, rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Usage("mean_all over an empty tensor".into()));
        }
        let sum: T = self.value(x).data().iter().copied().sum();
        let value = Tensor::scalar(sum / T::from_usize(n).unwrap());
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(value, Op::MeanAll { x: x.0 }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let sum: T = self.value(x).data().iter().copied().sum();
        let value = Tensor::scalar(sum);
        value.ensure_finite("sum_all")?;
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(value, Op::SumAll { x: x.0 }, rg))
    }

    /// Reverse pass from a scalar loss. Consumes the tape; returns gradients
    /// for every leaf that requires them (zero tensors for disconnected ones).
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adjoint: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let g = match adjoint[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adjoint)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                adjoint[id] = Some(g);
            }
        }

        let mut entries: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = adjoint[id]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                entries.push(Some(Tensor::new_unchecked(node.value.shape().to_vec(), data)));
            } else {
                entries.push(None);
            }
        }
        Ok(Gradients { entries })
    }

    fn accumulate(
        &self,
        adjoint: &mut [Option<Vec<T>>],
        target: usize,
        update: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = &mut adjoint[target];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[target].value.numel()]);
        }
        update(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, g: &[T], adjoint: &mut [Option<Vec<T>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                self.accumulate(adjoint, *a, |da| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[kk * n + j];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                });
                self.accumulate(adjoint, *b, |db| {
                    for kk in 0..k {
                        for j in 0..n {
                            let mut s = T::zero();
                            for i in 0..m {
                                s += av.data()[i * k + kk] * g[i * n + j];
                            }
                            db[kk * n + j] += s;
                        }
                    }
                });
            }
            Op::MatmulNT { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = av.dims2()?;
                let n = bv.rows();
                self.accumulate(adjoint, *a, |da| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[j * k + kk];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                });
                self.accumulate(adjoint, *b, |db| {
                    for j in 0..n {
                        for kk in 0..k {
                            let mut s = T::zero();
                            for i in 0..m {
                                s += g[i * n + j] * av.data()[i * k + kk];
                            }
                            db[j * k + kk] += s;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(adjoint, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(adjoint, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(adjoint, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(adjoint, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::MulElem { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                self.accumulate(adjoint, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(adjoint, *b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(adjoint, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * f;
                    }
                });
            }
            Op::Gather { src, ids } => {
                let c = self.nodes[id].value.cols();
                self.accumulate(adjoint, *src, |ds| {
                    for (row, &token) in ids.iter().enumerate() {
                        for j in 0..c {
                            ds[token * c + j] += g[row * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { src, start } => {
                let len = self.nodes[id].value.cols();
                let (rows, src_cols) = self.nodes[*src].value.dims2()?;
                self.accumulate(adjoint, *src, |ds| {
                    for i in 0..rows {
                        for j in 0..len {
                            ds[i * src_cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let (rows, cols) = self.nodes[id].value.dims2()?;
                self.accumulate(adjoint, *src, |ds| {
                    for i in 0..rows {
                        for j in 0..cols {
                            ds[(start + i) * cols + j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[id].value.rows();
                let total = self.nodes[id].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    let off = offset;
                    self.accumulate(adjoint, p, |dp| {
                        for i in 0..rows {
                            for j in 0..c {
                                dp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[id].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p].value.rows();
                    let off = offset;
                    self.accumulate(adjoint, p, |dp| {
                        dp.iter_mut()
                            .zip(&g[off * cols..(off + r) * cols])
                            .for_each(|(d, &gv)| *d += gv);
                    });
                    offset += r;
                }
            }
            Op::RmsNorm { x, gamma, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gamma].value.data();
                let d = gv.len();
                let n_rows = xv.numel() / d;
                let inv_d = T::one() / T::from_usize(d).unwrap();
                self.accumulate(adjoint, *x, |dx| {
                    for r in 0..n_rows {
                        let row = &xv.data()[r * d..(r + 1) * d];
                        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d + *eps;
                        let inv_rms = T::one() / ms.sqrt();
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += g[r * d + j] * gv[j] * row[j];
                        }
                        let scale = dot * inv_d * inv_rms * inv_rms * inv_rms;
                        for j in 0..d {
                            dx[r * d + j] += g[r * d + j] * gv[j] * inv_rms - row[j] * scale;
                        }
                    }
                });
                self.accumulate(adjoint, *gamma, |dg| {
                    for r in 0..n_rows {
                        let row = &xv.data()[r * d..(r + 1) * d];
                        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d + *eps;
                        let inv_rms = T::one() / ms.sqrt();
                        for j in 0..d {
                            dg[j] += g[r * d + j] * row[j] * inv_rms;
                        }
                    }
                });
            }
            Op::Rope { x, n_heads } => {
                let (seq, d_model) = self.nodes[id].value.dims2()?;
                let d_head = d_model / n_heads;
                let half = d_head / 2;
                let n_heads = *n_heads;
                self.accumulate(adjoint, *x, |dx| {
                    for pos in 0..seq {
                        for h in 0..n_heads {
                            for k in 0..half {
                                let (cos, sin) = rope_angles(pos, k, half);
                                let (cos, sin) = (T::from_f64(cos), T::from_f64(sin));
                                let c0 = pos * d_model + h * d_head + 2 * k;
                                let g0 = g[c0];
                                let g1 = g[c0 + 1];
                                dx[c0] += g0 * cos + g1 * sin;
                                dx[c0 + 1] += g1 * cos - g0 * sin;
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax { scores } => {
                let out = self.nodes[id].value.data();
                let n = self.nodes[id].value.rows();
                self.accumulate(adjoint, *scores, |ds| {
                    for i in 0..n {
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot += g[i * n + j] * out[i * n + j];
                        }
                        for j in 0..=i {
                            ds[i * n + j] += out[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let out = self.nodes[id].value.data();
                let (r, c) = self.nodes[id].value.dims2()?;
                self.accumulate(adjoint, *x, |dx| {
                    for i in 0..r {
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot += g[i * c + j] * out[i * c + j];
                        }
                        for j in 0..c {
                            dx[i * c + j] += out[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::Silu { x } => {
                let xv = self.nodes[*x].value.data();
                self.accumulate(adjoint, *x, |dx| {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        dx[i] += g[i] * s * (T::one() + xv[i] * (T::one() - s));
                    }
                });
            }
            Op::CosinePairs { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let out = self.nodes[id].value.data();
                let (m, d) = av.dims2()?;
                let k = bv.rows();
                let (na, ahat) = row_norms(av)?;
                let (nb, bhat) = row_norms(bv)?;
                self.accumulate(adjoint, *a, |da| {
                    for i in 0..m {
                        for j in 0..k {
                            let gij = g[i * k + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let c = out[i * k + j];
                            for t in 0..d {
                                da[i * d + t] +=
                                    gij * (bhat[j * d + t] - c * ahat[i * d + t]) / na[i];
                            }
                        }
                    }
                });
                self.accumulate(adjoint, *b, |db| {
                    for i in 0..m {
                        for j in 0..k {
                            let gij = g[i * k + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let c = out[i * k + j];
                            for t in 0..d {
                                db[j * d + t] +=
                                    gij * (ahat[i * d + t] - c * bhat[j * d + t]) / nb[j];
                            }
                        }
                    }
                });
            }
            Op::GatherEntries { src, index } => {
                let sc = self.nodes[*src].value.cols();
                self.accumulate(adjoint, *src, |ds| {
                    for (p, &(ri, ci)) in index.iter().enumerate() {
                        ds[ri * sc + ci] += g[p];
                    }
                });
            }
            Op::LogSumExpRows { x } => {
                let xv = &self.nodes[*x].value;
                let (r, c) = xv.dims2()?;
                self.accumulate(adjoint, *x, |dx| {
                    for i in 0..r {
                        let row = &xv.data()[i * c..(i + 1) * c];
                        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                        let z = row.iter().map(|&s| (s - m).exp()).sum::<T>();
                        for j in 0..c {
                            dx[i * c + j] += g[i] * (row[j] - m).exp() / z;
                        }
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].value.numel();
                let share = g[0] / T::from_usize(n).unwrap();
                self.accumulate(adjoint, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += share;
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.accumulate(adjoint, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row L2 norms and the row-normalized copy; zero rows are a numerical error.
fn row_norms<T: Scalar>(t: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (r, c) = t.dims2()?;
    let mut norms = Vec::with_capacity(r);
    let mut unit = t.data().to_vec();
    for i in 0..r {
        let row = &mut unit[i * c..(i + 1) * c];
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n == T::zero() {
            return Err(Error::Numerical(format!("zero-norm vector at row {i}")));
        }
        for v in row.iter_mut() {
            *v = *v / n;
        }
        norms.push(n);
    }
    Ok((norms, unit))
}
