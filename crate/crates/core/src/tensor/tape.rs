use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, softmax_row};
use super::{numel, Float, Tensor};
use crate::error::{bail, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Key-padding and causality constraints for one attention call.
///
/// `key_valid` is `batch × k_len`, `true` for real tokens. With `causal` set,
/// query `i` only sees keys `j <= i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttnMask {
    pub fn new(batch: usize, q_len: usize, k_len: usize, key_valid: Vec<bool>, causal: bool) -> Result<Self> {
        if key_valid.len() != batch * k_len {
            bail!(
                Shape,
                "key mask has {} entries, expected {batch}×{k_len}",
                key_valid.len()
            );
        }
        if causal && q_len > k_len {
            bail!(Shape, "causal mask needs q_len <= k_len, got {q_len} > {k_len}");
        }
        Ok(Self {
            batch,
            q_len,
            k_len,
            key_valid,
            causal,
        })
    }

    /// Mask that admits every key.
    pub fn full(batch: usize, q_len: usize, k_len: usize) -> Self {
        Self {
            batch,
            q_len,
            k_len,
            key_valid: vec![true; batch * k_len],
            causal: false,
        }
    }

    #[inline]
    fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, bias: usize, n: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    Relu { a: usize },
    Sum { a: usize },
    Softmax { a: usize, n: usize },
    LayerNorm { x: usize, gain: usize, offset: usize, n: usize, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: usize, v: usize, probs: Vec<T>, targets: Vec<usize>, mask: Vec<bool>, smoothing: T, count: usize },
    Embedding { table: usize, ids: Vec<usize>, d: usize },
    Attention { q: usize, k: usize, v: usize, mask: AttnMask, heads: usize, probs: Vec<T> },
    MaskScale { a: usize, mask: Vec<T> },
    Replicate { x: usize, groups: Vec<usize>, slots: usize, w: usize },
    GroupBias { a: usize, bias: usize, groups: Vec<usize>, n: usize },
    SelectRows { a: usize, rows: Vec<usize>, n: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Values live on the tape;
/// [`Tape::backward`] replays the adjoints in reverse order.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    id: u64,
}

/// Adjoints produced by one backward pass.
pub struct Grads<T> {
    adj: Vec<Option<Vec<T>>>,
    tape: u64,
}

impl<T: Float> Grads<T> {
    /// Gradient of the loss with respect to `var`, or `None` when the value
    /// does not require a gradient.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.tape {
            return None;
        }
        self.adj.get(var.idx).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into the tensor's gradient buffer.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn grad_buf<'a, T: Float>(nodes: &[Node<T>], lower: &'a mut [Option<Vec<T>>], i: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(lower[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]))
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let n = shape.last().copied().unwrap_or(1);
    (numel(shape) / n.max(1), n)
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record. Handles from before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Drops every record after the first `len`. Earlier handles stay valid;
    /// handles to dropped records must not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            bail!(Graph, "value is not recorded on this tape");
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Records a tensor as a leaf; it is differentiated iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            bail!(Shape, "shape {shape:?} needs {} values, got {}", numel(shape), data.len());
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[self.check(v).expect("foreign var")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.check(v).expect("foreign var")].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape shapes are valid")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Shape, "matmul of {sa:?} and {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.nodes[ia].value, &self.nodes[ib].value, &mut out, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a: ia, b: ib, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            bail!(Shape, "add of {:?} and {:?}", self.nodes[ia].shape, self.nodes[ib].shape);
        }
        let out = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(self.nodes[ia].shape.clone(), out, rg, Op::Add { a: ia, b: ib }))
    }

    /// Adds a vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (_, n) = rows_cols(&self.nodes[ia].shape);
        if self.nodes[ib].value.len() != n {
            bail!(Shape, "bias of {:?} for rows of width {n}", self.nodes[ib].shape);
        }
        let bias_v = &self.nodes[ib].value;
        let mut out = self.nodes[ia].value.clone();
        for row in out.chunks_mut(n) {
            add_into(row, bias_v);
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(self.nodes[ia].shape.clone(), out, rg, Op::AddBias { a: ia, bias: ib, n }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            bail!(Shape, "mul of {:?} and {:?}", self.nodes[ia].shape, self.nodes[ib].shape);
        }
        let out = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(self.nodes[ia].shape.clone(), out, rg, Op::Mul { a: ia, b: ib }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.iter().map(|&x| x * c).collect();
        let rg = self.rg(ia);
        Ok(self.push(self.nodes[ia].shape.clone(), out, rg, Op::Scale { a: ia, c }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.iter().map(|&x| x.max(T::zero())).collect();
        let rg = self.rg(ia);
        Ok(self.push(self.nodes[ia].shape.clone(), out, rg, Op::Relu { a: ia }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.iter().copied().sum();
        let rg = self.rg(ia);
        Ok(self.push(Vec::new(), vec![s], rg, Op::Sum { a: ia }))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let (_, n) = rows_cols(&shape);
        if shape.is_empty() || n == 0 {
            bail!(Shape, "softmax over an empty axis");
        }
        let mut out = self.nodes[ia].value.clone();
        out.chunks_mut(n).for_each(softmax_row);
        let rg = self.rg(ia);
        Ok(self.push(shape, out, rg, Op::Softmax { a: ia, n }))
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: T) -> Result<Var> {
        let (ix, ig, io) = (self.check(x)?, self.check(gain)?, self.check(offset)?);
        let shape = self.nodes[ix].shape.clone();
        let (rows, n) = rows_cols(&shape);
        if self.nodes[ig].value.len() != n || self.nodes[io].value.len() != n {
            bail!(Shape, "layer norm parameters must have width {n}");
        }
        if n == 1 && eps == T::zero() {
            bail!(Numeric, "layer norm over width 1 with eps = 0 divides by zero");
        }
        let nf = T::lit(n as f64);
        let xv = &self.nodes[ix].value;
        let (gv, ov) = (&self.nodes[ig].value, &self.nodes[io].value);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let denom = (var + eps).sqrt();
            if denom == T::zero() {
                bail!(Numeric, "layer norm of a constant row with eps = 0");
            }
            let rs = T::one() / denom;
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = gv[c] * h + ov[c];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(io);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                offset: io,
                n,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean label-smoothed negative log-likelihood over rows whose `mask`
    /// entry is `true`. The smoothed target puts `1 - smoothing` on the
    /// reference id and spreads `smoothing` uniformly over the vocabulary.
    /// A batch with no unmasked rows has loss 0 and zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool], smoothing: T) -> Result<Var> {
        let il = self.check(logits)?;
        let shape = &self.nodes[il].shape;
        if shape.len() != 2 {
            bail!(Shape, "cross entropy expects [T×V] logits, got {shape:?}");
        }
        let (rows, v) = (shape[0], shape[1]);
        if targets.len() != rows || mask.len() != rows {
            bail!(Shape, "{} targets / {} mask entries for {rows} rows", targets.len(), mask.len());
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            bail!(Vocab, "target id {bad} outside vocabulary of size {v}");
        }
        let mut probs = self.nodes[il].value.clone();
        let count = mask.iter().filter(|&&m| m).count();
        let vf = T::lit(v as f64);
        let keep = T::one() - smoothing;
        let mut total = T::zero();
        for r in 0..rows {
            let row = &mut probs[r * v..(r + 1) * v];
            if !mask[r] {
                continue;
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mean_logit = row.iter().copied().sum::<T>() / vf;
            let target_logit = row[targets[r]];
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            // -Σ q log p = lse - Σ q x
            total += z.ln() + max - keep * target_logit - smoothing * mean_logit;
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        if !loss.is_finite() {
            bail!(Numeric, "non-finite cross-entropy loss");
        }
        let rg = self.rg(il);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits: il,
                v,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                smoothing,
                count,
            },
        ))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let shape = &self.nodes[it].shape;
        if shape.len() != 2 {
            bail!(Shape, "embedding table must be 2-D, got {shape:?}");
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            bail!(Vocab, "token id {bad} outside vocabulary of size {vocab}");
        }
        if ids.is_empty() {
            bail!(Shape, "embedding lookup of zero ids");
        }
        let tv = &self.nodes[it].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(it);
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Embedding { table: it, ids: ids.to_vec(), d }))
    }

    /// Scaled dot-product attention split over `heads`, heads concatenated.
    ///
    /// `q` is `[B·Tq × d]`, `k` is `[B·Tk × d]`, `v` is `[B·Tk × dv]`; rows are
    /// grouped by batch entry. A query with no admissible key yields zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttnMask, heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (sq, sk, sv) = (&self.nodes[iq].shape, &self.nodes[ik].shape, &self.nodes[iv].shape);
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            bail!(Shape, "attention inputs must be 2-D");
        }
        let (d, dv) = (sq[1], sv[1]);
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            bail!(Shape, "widths {d}/{dv} not divisible by {heads} heads");
        }
        let (b, tq, tk) = (mask.batch, mask.q_len, mask.k_len);
        if sq[0] != b * tq || sk[0] != b * tk || sv[0] != b * tk || sk[1] != d {
            bail!(Shape, "attention shapes {sq:?} {sk:?} {sv:?} do not match mask {b}×{tq}×{tk}");
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let mut probs = vec![T::zero(); b * heads * tq * tk];
        let mut out = vec![T::zero(); b * tq * dv];
        let mut scores = vec![T::zero(); tk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..tq {
                    let qrow = &qv[(bi * tq + i) * d + h * dh..][..dh];
                    let mut max = T::neg_infinity();
                    let mut any = false;
                    for j in 0..tk {
                        if mask.allows(bi, i, j) {
                            let krow = &kv[(bi * tk + j) * d + h * dh..][..dh];
                            let s = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                            any = true;
                        }
                    }
                    if !any {
                        continue;
                    }
                    let prow = &mut probs[((bi * heads + h) * tq + i) * tk..][..tk];
                    let mut total = T::zero();
                    for j in 0..tk {
                        if mask.allows(bi, i, j) {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            total += e;
                        }
                    }
                    let orow = &mut out[(bi * tq + i) * dv + h * dvh..][..dvh];
                    for j in 0..tk {
                        if prow[j] != T::zero() {
                            prow[j] /= total;
                            let vrow = &vv[(bi * tk + j) * dv + h * dvh..][..dvh];
                            let p = prow[j];
                            orow.iter_mut().zip(vrow).for_each(|(o, &x)| *o += p * x);
                        }
                    }
                }
            }
        }
        let rg = self.rg(iq) || self.rg(ik) || self.rg(iv);
        Ok(self.push(
            vec![b * tq, dv],
            out,
            rg,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                mask: mask.clone(),
                heads,
                probs,
            },
        ))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask_scale(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let ia = self.check(a)?;
        if mask.len() != self.nodes[ia].value.len() {
            bail!(Shape, "mask of length {} for {:?}", mask.len(), self.nodes[ia].shape);
        }
        let out = self.nodes[ia].value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(ia);
        Ok(self.push(self.nodes[ia].shape.clone(), out, rg, Op::MaskScale { a: ia, mask }))
    }

    /// Builds rows `[x, 0, .., x, .., 0]` of `slots + 1` blocks: the shared
    /// block first, then `x` again in block `1 + groups[r]`.
    pub fn replicate_slots(&mut self, x: Var, groups: &[usize], slots: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let shape = &self.nodes[ix].shape;
        if shape.len() != 2 || shape[0] != groups.len() {
            bail!(Shape, "slot replication of {shape:?} with {} group ids", groups.len());
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= slots) {
            bail!(Group, "group index {g} outside {slots} groups");
        }
        let (rows, w) = (shape[0], shape[1]);
        let width = (slots + 1) * w;
        let xv = &self.nodes[ix].value;
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            let src = &xv[r * w..(r + 1) * w];
            out[r * width..r * width + w].copy_from_slice(src);
            let at = r * width + (1 + groups[r]) * w;
            out[at..at + w].copy_from_slice(src);
        }
        let rg = self.rg(ix);
        Ok(self.push(
            vec![rows, width],
            out,
            rg,
            Op::Replicate {
                x: ix,
                groups: groups.to_vec(),
                slots,
                w,
            },
        ))
    }

    /// Adds row `groups[r]` of `bias` to row `r` of `a`.
    pub fn add_group_bias(&mut self, a: Var, bias: Var, groups: &[usize]) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sa[0] != groups.len() {
            bail!(Shape, "group bias {sb:?} for logits {sa:?} with {} groups", groups.len());
        }
        let n = sa[1];
        if let Some(&g) = groups.iter().find(|&&g| g >= sb[0]) {
            bail!(Group, "no bias vector for group index {g}");
        }
        let bv = &self.nodes[ib].value;
        let mut out = self.nodes[ia].value.clone();
        for (r, &g) in groups.iter().enumerate() {
            add_into(&mut out[r * n..(r + 1) * n], &bv[g * n..(g + 1) * n]);
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            self.nodes[ia].shape.clone(),
            out,
            rg,
            Op::GroupBias {
                a: ia,
                bias: ib,
                groups: groups.to_vec(),
                n,
            },
        ))
    }

    /// Gathers the listed rows of a 2-D value.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = &self.nodes[ia].shape;
        if shape.len() != 2 {
            bail!(Shape, "row selection needs a 2-D value, got {shape:?}");
        }
        let (m, n) = (shape[0], shape[1]);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            bail!(Shape, "row selection {rows:?} out of {m} rows");
        }
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        let rg = self.rg(ia);
        Ok(self.push(vec![rows.len(), n], out, rg, Op::SelectRows { a: ia, rows: rows.to_vec(), n }))
    }

    /// Reverse pass from a scalar `loss`. Returns the adjoint of every value
    /// that requires a gradient; leaves that the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            bail!(Graph, "backward needs a scalar loss, got shape {:?}", self.nodes[il].shape);
        }
        if !self.nodes[il].value[0].is_finite() {
            bail!(Numeric, "non-finite loss");
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=il).map(|_| None).collect();
        if self.nodes[il].requires_grad {
            adj[il] = Some(vec![T::one()]);
        }
        for idx in (0..=il).rev() {
            let (lower, upper) = adj.split_at_mut(idx);
            let Some(g) = upper[0].as_deref() else { continue };
            self.propagate(idx, g, lower);
        }
        for (idx, slot) in adj.iter_mut().enumerate() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                *slot = None;
            } else if slot.is_none() {
                *slot = Some(vec![T::zero(); node.value.len()]);
            } else if matches!(node.op, Op::Leaf) && slot.as_ref().unwrap().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        Ok(Grads { adj, tape: self.id })
    }

    fn propagate(&self, idx: usize, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! buf {
            ($i:expr) => {
                grad_buf(nodes, lower, $i)
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = buf!(a) {
                    gemm_nt(g, &nodes[b].value, da, m, n, k);
                }
                if let Some(db) = buf!(b) {
                    gemm_tn(&nodes[a].value, g, db, m, k, n);
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = buf!(a) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(b) {
                    add_into(db, g);
                }
            }
            &Op::AddBias { a, bias, n } => {
                if let Some(da) = buf!(a) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(bias) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = buf!(a) {
                    da.iter_mut()
                        .zip(g.iter().zip(&nodes[b].value))
                        .for_each(|(d, (&gi, &bi))| *d += gi * bi);
                }
                if let Some(db) = buf!(b) {
                    db.iter_mut()
                        .zip(g.iter().zip(&nodes[a].value))
                        .for_each(|(d, (&gi, &ai))| *d += gi * ai);
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = buf!(a) {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * c);
                }
            }
            &Op::Relu { a } => {
                if let Some(da) = buf!(a) {
                    da.iter_mut()
                        .zip(g.iter().zip(&nodes[a].value))
                        .for_each(|(d, (&gi, &x))| {
                            if x > T::zero() {
                                *d += gi
                            }
                        });
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = buf!(a) {
                    let g0 = g[0];
                    da.iter_mut().for_each(|d| *d += g0);
                }
            }
            &Op::Softmax { a, n } => {
                if let Some(da) = buf!(a) {
                    let y = &nodes[idx].value;
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<T>();
                        for c in 0..n {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                n,
                xhat,
                rstd,
            } => {
                let (x, gain, offset, n) = (*x, *gain, *offset, *n);
                if let Some(dg) = buf!(gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (&a, &b))| *d += a * b);
                    }
                }
                if let Some(doff) = buf!(offset) {
                    for gr in g.chunks(n) {
                        add_into(doff, gr);
                    }
                }
                if let Some(dx) = buf!(x) {
                    let gv = &nodes[gain].value;
                    let nf = T::lit(n as f64);
                    let mut dh = vec![T::zero(); n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dh[c] = gr[c] * gv[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / nf;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for c in 0..n {
                            dr[c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                v,
                probs,
                targets,
                mask,
                smoothing,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(dl) = buf!(*logits) {
                    let v = *v;
                    let scale = g[0] / T::lit(*count as f64);
                    let uniform = *smoothing / T::lit(v as f64);
                    let keep = T::one() - *smoothing;
                    for r in 0..mask.len() {
                        if !mask[r] {
                            continue;
                        }
                        let pr = &probs[r * v..(r + 1) * v];
                        let dr = &mut dl[r * v..(r + 1) * v];
                        for c in 0..v {
                            dr[c] += scale * (pr[c] - uniform);
                        }
                        dr[targets[r]] -= scale * keep;
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if let Some(dt) = buf!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, mask, *heads, probs, g, lower),
            Op::MaskScale { a, mask } => {
                if let Some(da) = buf!(*a) {
                    da.iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(d, (&gi, &m))| *d += gi * m);
                }
            }
            Op::Replicate { x, groups, slots, w } => {
                if let Some(dx) = buf!(*x) {
                    let width = (slots + 1) * w;
                    for (r, &grp) in groups.iter().enumerate() {
                        let dr = &mut dx[r * w..(r + 1) * w];
                        add_into(dr, &g[r * width..r * width + w]);
                        let at = r * width + (1 + grp) * w;
                        add_into(dr, &g[at..at + w]);
                    }
                }
            }
            Op::GroupBias { a, bias, groups, n } => {
                if let Some(da) = buf!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = buf!(*bias) {
                    for (r, &grp) in groups.iter().enumerate() {
                        add_into(&mut db[grp * n..(grp + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SelectRows { a, rows, n } => {
                if let Some(da) = buf!(*a) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut da[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        mask: &AttnMask,
        heads: usize,
        probs: &[T],
        g: &[T],
        lower: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
        let (d, dv) = (nodes[q].shape[1], nodes[v].shape[1]);
        let (dh, dvh) = (d / heads, dv / heads);
        let (b, tq, tk) = (mask.batch, mask.q_len, mask.k_len);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = nodes[q].requires_grad.then(|| vec![T::zero(); qv.len()]);
        let mut dk = nodes[k].requires_grad.then(|| vec![T::zero(); kv.len()]);
        let mut dvv = nodes[v].requires_grad.then(|| vec![T::zero(); vv.len()]);
        let mut dp = vec![T::zero(); tk];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..tq {
                    let prow = &probs[((bi * heads + h) * tq + i) * tk..][..tk];
                    let grow = &g[(bi * tq + i) * dv + h * dvh..][..dvh];
                    let mut dot = T::zero();
                    for j in 0..tk {
                        if prow[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vrow = &vv[(bi * tk + j) * dv + h * dvh..][..dvh];
                        dp[j] = grow.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        if let Some(dvv) = dvv.as_mut() {
                            let p = prow[j];
                            dvv[(bi * tk + j) * dv + h * dvh..][..dvh]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, &x)| *o += p * x);
                        }
                    }
                    let qoff = (bi * tq + i) * d + h * dh;
                    for j in 0..tk {
                        if prow[j] == T::zero() {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let koff = (bi * tk + j) * d + h * dh;
                        if let Some(dq) = dq.as_mut() {
                            let krow = &kv[koff..koff + dh];
                            dq[qoff..qoff + dh].iter_mut().zip(krow).for_each(|(o, &x)| *o += ds * x);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let qrow = &qv[qoff..qoff + dh];
                            dk[koff..koff + dh].iter_mut().zip(qrow).for_each(|(o, &x)| *o += ds * x);
                        }
                    }
                }
            }
        }
        for (i, part) in [(q, dq), (k, dk), (v, dvv)] {
            if let Some(part) = part {
                match &mut lower[i] {
                    Some(acc) => add_into(acc, &part),
                    slot => *slot = Some(part),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[11.0]);

        let z = tape.constant(&Tensor::zeros(&[3, 4]));
        let any = tape.constant(&Tensor::from_fn(&[4, 2], |i| i as f64 - 3.5));
        let out = tape.matmul(z, any).unwrap();
        assert_eq!(tape.shape(out), &[3, 2]);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));

        assert!(matches!(tape.matmul(a, a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(&t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);

        let mut tape32 = Tape::<f32>::new();
        let x = tape32.constant(&Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = tape32.softmax(x).unwrap();
        let v = tape32.value(y);
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1] < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(&Tensor::ones(&[2]));
        let o = tape.constant(&Tensor::zeros(&[2]));
        let x = tape.constant(&t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, o, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-9);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-9);

        let g3 = tape.constant(&Tensor::ones(&[3]));
        let o3 = tape.constant(&Tensor::zeros(&[3]));
        let c = tape.constant(&t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(c, g3, o3, 1e-6).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let zero_gain = tape.constant(&Tensor::zeros(&[3]));
        let off = tape.constant(&t(&[3], &[0.5, -1.0, 2.0]));
        let x = tape.constant(&t(&[2, 3], &[1.0, -4.0, 9.0, 0.3, 0.2, 0.1]));
        let y = tape.layer_norm(x, zero_gain, off, 1e-6).unwrap();
        assert_eq!(tape.value(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

        let g1 = tape.constant(&Tensor::ones(&[1]));
        let o1 = tape.constant(&Tensor::zeros(&[1]));
        let x1 = tape.constant(&t(&[2, 1], &[1.0, 2.0]));
        assert!(matches!(tape.layer_norm(x1, g1, o1, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let mut logits = vec![0.0; 8];
        logits[1] = 1e3;
        logits[4 + 2] = 1e3;
        let x = tape.constant(&t(&[2, 4], &logits));
        let l = tape.cross_entropy(x, &[1, 2], &[true, true], 0.0).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);

        let u = tape.constant(&Tensor::zeros(&[3, 4]));
        let l = tape.cross_entropy(u, &[0, 1, 3], &[true, true, true], 0.0).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-15);

        let p = tape.leaf(&Tensor::from_fn(&[2, 4], |i| i as f64).with_grad());
        let l = tape.cross_entropy(p, &[0, 1], &[false, false], 0.1).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(p).unwrap().iter().all(|&g| g == 0.0));

        assert!(matches!(tape.cross_entropy(u, &[0, 4, 1], &[true; 3], 0.0), Err(Error::Vocab(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5).with_grad());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[2.0, 4.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let l = tape.sum(x).unwrap();
        assert!(tape.backward(l).unwrap().get(x).is_none());
    }

    #[test]
    fn loss_from_another_tape_is_a_graph_error() {
        let mut a = Tape::<f64>::new();
        let x = a.leaf(&t(&[1], &[1.0]).with_grad());
        let l = a.sum(x).unwrap();
        let b = Tape::<f64>::new();
        assert!(matches!(b.backward(l), Err(Error::Graph(_))));
        a.clear();
        assert!(matches!(a.backward(l), Err(Error::Graph(_))));
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(&Tensor::zeros(&[1, 2]));
        let k = tape.constant(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = tape.constant(&t(&[3, 2], &[1.0, 10.0, 2.0, 20.0, 6.0, 60.0]));
        let out = tape.attention(q, k, v, &AttnMask::full(1, 1, 3), 1).unwrap();
        assert!((tape.value(out)[0] - 3.0).abs() < 1e-14);
        assert!((tape.value(out)[1] - 30.0).abs() < 1e-14);

        let mask = AttnMask::new(1, 1, 3, vec![false, true, false], false).unwrap();
        let out = tape.attention(q, k, v, &mask, 2).unwrap();
        assert_eq!(tape.value(out), &[2.0, 20.0]);
    }
}
