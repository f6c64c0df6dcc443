//! Define-by-run reverse-mode differentiation over dense row-major arrays.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! data its backward rule needs. Nodes are addressed by [`Var`] handles and
//! arrays have at most three axes (batch, sequence, feature).

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Linear { x: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Transpose { x: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    MaskedSoftmax { x: Var },
    MaskedRelu { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Sum { x: Var },
    SumSquares { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Gather { .. } => "embedding_gather",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Linear { .. } => "matmul",
            Op::Bmm { .. } => "batched_matmul",
            Op::Transpose { .. } => "transpose_last_two",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::MaskedSoftmax { .. } => "masked_softmax_rows",
            Op::MaskedRelu { .. } => "relu_rows",
            Op::CrossEntropy { .. } => "cross_entropy_from_logits",
            Op::Sum { .. } => "sum",
            Op::SumSquares { .. } => "sum_squares",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    /// Per-position losses of each cross-entropy node (0 where unsupervised).
    ce_losses: Vec<(Var, Vec<T>)>,
}

/// Lane-wise `x * 0` stays zero exactly when every `x` is finite.
fn all_finite<T: Scalar>(x: &[T]) -> bool {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + v * T::zero();
        }
    }
    acc.iter().chain(rest).all(|v| v.is_finite())
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Split `shape` into (number of rows, last axis).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, lead)) => (numel(lead), c),
        None => (1, 1),
    }
}

fn as3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, m, n] => Ok((b, m, n)),
        [m, n] => Ok((1, m, n)),
        _ => Err(Error::arg(format!("expected a 2- or 3-axis array, got shape {shape:?}"))),
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), values: Vec::new(), grads: Vec::new(), ce_losses: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0][0]
    }

    /// Per-position losses recorded by a cross-entropy node.
    pub fn position_losses(&self, v: Var) -> Option<&[T]> {
        self.ce_losses.iter().find(|(id, _)| *id == v).map(|(_, l)| l.as_slice())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !all_finite(&value) {
            let bad = value.iter().find(|x| !x.is_finite()).copied().unwrap_or_else(T::zero);
            return Err(Error::numeric(op.name(), format!("non-finite output {bad}")));
        }
        self.nodes.push(Node { shape, op, requires_grad });
        self.values.push(value);
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if shape.len() > 3 || numel(shape) != value.len() {
            return Err(Error::arg(format!("leaf: {} values do not fit shape {shape:?} (rank at most 3)", value.len())));
        }
        self.push(shape.to_vec(), value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    /// Rows of a `[n, d]` table selected by `ids`, shaped `out_lead + [d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize], out_lead: &[usize]) -> Result<Var> {
        let &[n, d] = self.shape(table) else {
            return Err(Error::arg("embedding_gather: table must be 2-axis"));
        };
        if numel(out_lead) != ids.len() || out_lead.len() > 2 {
            return Err(Error::arg("embedding_gather: ids do not fit the requested shape"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::arg(format!("embedding_gather: id {bad} out of range {n}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = out_lead.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        self.push(shape, out, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    fn broadcast_check(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.len() < sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(Error::arg(format!("{op}: shapes {sa:?} and {sb:?} do not conform")))
        }
    }

    /// `a + b`, where `b` has the shape of `a` or of its trailing axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let bv = self.value(b);
        let out: Vec<T> = self.value(a).iter().zip(bv.iter().cycle()).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg)
    }

    /// Elementwise `a * b` with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let bv = self.value(b);
        let out: Vec<T> = self.value(a).iter().zip(bv.iter().cycle()).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, rg)
    }

    /// Normalize over the last axis, no affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// `x Wᵀ` with `W` stored `[out, in]` and applied to the last axis of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let &[n_out, k] = self.shape(w) else {
            return Err(Error::arg("matmul: weight must be 2-axis"));
        };
        let (rows, kx) = rows_cols(self.shape(x));
        if kx != k {
            return Err(Error::arg(format!("matmul: inner dims {kx} vs {k}")));
        }
        let mut out = vec![T::zero(); rows * n_out];
        gemm(T::one(), MatRef::new(self.value(x), rows, k), MatRef::t(self.value(w), n_out, k), T::zero(), &mut out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = n_out;
        let rg = self.rg(x) || self.rg(w);
        self.push(shape, out, Op::Linear { x, w }, rg)
    }

    /// Batched `a @ b` (or `a @ bᵀ` when `trans_b`) over the leading axis.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = as3(self.shape(a))?;
        let (bb, r, c) = as3(self.shape(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::arg(format!(
                "bmm: shapes {:?} and {:?} do not conform",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            let am = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
            let bs = &bv[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { MatRef::t(bs, n, k) } else { MatRef::new(bs, k, n) };
            gemm(T::one(), am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let (b, m, n) = as3(self.shape(x))?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..b {
            for r in 0..m {
                for c in 0..n {
                    out[i * m * n + c * m + r] = xv[i * m * n + r * n + c];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(x);
        self.push(shape, out, Op::Transpose { x }, rg)
    }

    /// `[B, L, H*dh] -> [B*H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let &[b, l, d] = self.shape(x) else {
            return Err(Error::arg("split_heads: expected [B, L, d]"));
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::arg(format!("split_heads: {d} features not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..l {
                    let src = &xv[(bi * l + t) * d + h * dh..][..dh];
                    out[((bi * heads + h) * l + t) * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![b * heads, l, dh], out, Op::SplitHeads { x, heads }, rg)
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let &[bh, l, dh] = self.shape(x) else {
            return Err(Error::arg("merge_heads: expected [B*H, L, dh]"));
        };
        if heads == 0 || bh % heads != 0 {
            return Err(Error::arg("merge_heads: leading axis not divisible by heads"));
        }
        let (b, d) = (bh / heads, dh * heads);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..l {
                    let src = &xv[((bi * heads + h) * l + t) * dh..][..dh];
                    out[(bi * l + t) * d + h * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let rg = self.rg(x);
        self.push(vec![b, l, d], out, Op::MergeHeads { x, heads }, rg)
    }

    fn square_last_two(&self, x: Var, op: &str) -> Result<(usize, usize)> {
        let (b, m, n) = as3(self.shape(x))?;
        if m != n {
            return Err(Error::arg(format!("{op}: causal mask needs square maps, got {m}x{n}")));
        }
        Ok((b, n))
    }

    /// Causal SoftMax over the last axis: row `i` sees columns `0..=i`.
    pub fn masked_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (b, n) = self.square_last_two(x, "masked_softmax_rows")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for m in 0..b {
            for i in 0..n {
                let base = (m * n + i) * n;
                let row = &xv[base..base + i + 1];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let o = &mut out[base..base + i + 1];
                let mut s = T::zero();
                for (oj, &xj) in o.iter_mut().zip(row) {
                    *oj = (xj - mx).exp();
                    s = s + *oj;
                }
                o.iter_mut().for_each(|v| *v = *v / s);
            }
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::MaskedSoftmax { x }, rg)
    }

    /// Causal ReLU attention: `relu(x)` on `j <= i`, zero above the diagonal, no renormalization.
    pub fn relu_rows(&mut self, x: Var) -> Result<Var> {
        let (b, n) = self.square_last_two(x, "relu_rows")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for m in 0..b {
            for i in 0..n {
                let base = (m * n + i) * n;
                for j in 0..=i {
                    out[base + j] = xv[base + j].max(T::zero());
                }
            }
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::MaskedRelu { x }, rg)
    }

    /// Mean next-token NLL over positions where `mask` is set.
    ///
    /// `logits` is `[.., C]` with one target per row. Per-row losses are kept
    /// and can be read back with [`Graph::position_losses`].
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, c) = rows_cols(self.shape(logits));
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::arg("cross_entropy_from_logits: targets/mask length mismatch"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::arg("cross_entropy_from_logits: no supervised positions"));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut losses = vec![T::zero(); rows];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= c {
                return Err(Error::arg(format!("cross_entropy_from_logits: target {} out of range", targets[r])));
            }
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut s = T::zero();
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - mx).exp();
                s = s + *pj;
            }
            p.iter_mut().for_each(|v| *v = *v / s);
            let l = s.ln() + mx - row[targets[r]];
            losses[r] = l;
            total = total + l;
        }
        let mean = total / T::from_usize(count).unwrap();
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count };
        let v = self.push(Vec::new(), vec![mean], op, rg)?;
        self.ce_losses.push((v, losses));
        Ok(v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum { x }, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().map(|&v| v * v).sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::SumSquares { x }, rg)
    }

    /// Reverse sweep from a scalar `root`; fills gradients of every node it depends on.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::arg(format!("backward: root has shape {:?}, expected a scalar", self.shape(root))));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(gy) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(gy);
                continue;
            }
            self.backward_node(i, &gy)?;
            if !all_finite(&gy) {
                let bad = gy.iter().find(|x| !x.is_finite()).copied().unwrap_or_else(T::zero);
                return Err(Error::numeric(self.nodes[i].op.name(), format!("non-finite gradient {bad}")));
            }
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Gradient buffer of `v`, allocated on first use; `None` if `v` needs no gradient.
    fn gbuf<'a>(nodes: &[Node<T>], values: &[Vec<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); values[v.0].len()]))
    }

    fn backward_node(&mut self, i: usize, gy: &[T]) -> Result<()> {
        let (nodes, values, grads) = (&self.nodes, &self.values, &mut self.grads);
        let y = &values[i];
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                if let Some(g) = Self::gbuf(nodes, values, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        accumulate(&mut g[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(g) = Self::gbuf(nodes, values, grads, *a) {
                    accumulate(g, gy);
                }
                if let Some(g) = Self::gbuf(nodes, values, grads, *b) {
                    let n = g.len();
                    for chunk in gy.chunks(n) {
                        accumulate(g, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let n = values[b.0].len();
                if let Some(g) = Self::gbuf(nodes, values, grads, a) {
                    let bv = &values[b.0];
                    for (k, (gk, &gyk)) in g.iter_mut().zip(gy).enumerate() {
                        *gk = *gk + gyk * bv[k % n];
                    }
                }
                if let Some(g) = Self::gbuf(nodes, values, grads, b) {
                    let av = &values[a.0];
                    for (k, (&gyk, &ak)) in gy.iter().zip(av).enumerate() {
                        g[k % n] = g[k % n] + gyk * ak;
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    for (gk, &gyk) in g.iter_mut().zip(gy) {
                        *gk = *gk + gyk * c;
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    for ((gk, &gyk), &yk) in g.iter_mut().zip(gy).zip(y) {
                        if yk > T::zero() {
                            *gk = *gk + gyk;
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let (rows, d) = rows_cols(&nodes[i].shape);
                let dn = T::from_usize(d).unwrap();
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let mg = gr.iter().copied().sum::<T>() / dn;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let s = inv_std[r];
                        for ((gk, &gyk), &yk) in g[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                            *gk = *gk + s * (gyk - mg - yk * mgy);
                        }
                    }
                }
            }
            Op::Linear { x, w } => {
                let (x, w) = (*x, *w);
                let (n_out, k) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                let rows = values[x.0].len() / k;
                let gym = MatRef::new(gy, rows, n_out);
                if nodes[x.0].requires_grad {
                    let mut g = grads[x.0].take().unwrap_or_else(|| vec![T::zero(); rows * k]);
                    gemm(T::one(), gym, MatRef::new(&values[w.0], n_out, k), T::one(), &mut g);
                    grads[x.0] = Some(g);
                }
                if nodes[w.0].requires_grad {
                    let mut g = grads[w.0].take().unwrap_or_else(|| vec![T::zero(); n_out * k]);
                    gemm(T::one(), MatRef::t(gy, rows, n_out), MatRef::new(&values[x.0], rows, k), T::one(), &mut g);
                    grads[w.0] = Some(g);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (ba, m, k) = as3(&nodes[a.0].shape)?;
                let n = *nodes[i].shape.last().unwrap();
                if nodes[a.0].requires_grad {
                    let mut g = grads[a.0].take().unwrap_or_else(|| vec![T::zero(); ba * m * k]);
                    for t in 0..ba {
                        let gyt = MatRef::new(&gy[t * m * n..(t + 1) * m * n], m, n);
                        let bs = &values[b.0][t * k * n..(t + 1) * k * n];
                        // dA = dC Bᵀ
                        let bt = if trans_b { MatRef::new(bs, n, k) } else { MatRef::t(bs, k, n) };
                        gemm(T::one(), gyt, bt, T::one(), &mut g[t * m * k..(t + 1) * m * k]);
                    }
                    grads[a.0] = Some(g);
                }
                if nodes[b.0].requires_grad {
                    let mut g = grads[b.0].take().unwrap_or_else(|| vec![T::zero(); ba * k * n]);
                    for t in 0..ba {
                        let gys = &gy[t * m * n..(t + 1) * m * n];
                        let as_ = &values[a.0][t * m * k..(t + 1) * m * k];
                        let gt = &mut g[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // d(Bᵀ) stored n x k: dCᵀ A
                            gemm(T::one(), MatRef::t(gys, m, n), MatRef::new(as_, m, k), T::one(), gt);
                        } else {
                            gemm(T::one(), MatRef::t(as_, m, k), MatRef::new(gys, m, n), T::one(), gt);
                        }
                    }
                    grads[b.0] = Some(g);
                }
            }
            Op::Transpose { x } => {
                let (b, m, n) = as3(&nodes[x.0].shape)?;
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    for t in 0..b {
                        for r in 0..m {
                            for c in 0..n {
                                let k = t * m * n;
                                g[k + r * n + c] = g[k + r * n + c] + gy[k + c * m + r];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let heads = *heads;
                let (b, l, d) = as3(&nodes[x.0].shape)?;
                let dh = d / heads;
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    for bi in 0..b {
                        for h in 0..heads {
                            for t in 0..l {
                                let src = &gy[((bi * heads + h) * l + t) * dh..][..dh];
                                accumulate(&mut g[(bi * l + t) * d + h * dh..][..dh], src);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let heads = *heads;
                let (bh, l, dh) = as3(&nodes[x.0].shape)?;
                let (b, d) = (bh / heads, dh * heads);
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    for bi in 0..b {
                        for h in 0..heads {
                            for t in 0..l {
                                let src = &gy[(bi * l + t) * d + h * dh..][..dh];
                                accumulate(&mut g[((bi * heads + h) * l + t) * dh..][..dh], src);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let (b, n, _) = as3(&nodes[i].shape)?;
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    for m in 0..b {
                        for r in 0..n {
                            let base = (m * n + r) * n;
                            let yr = &y[base..base + r + 1];
                            let gr = &gy[base..base + r + 1];
                            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            for ((gk, &yk), &gyk) in g[base..base + r + 1].iter_mut().zip(yr).zip(gr) {
                                *gk = *gk + yk * (gyk - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedRelu { x } => {
                let (b, n, _) = as3(&nodes[i].shape)?;
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    let xv = &values[x.0];
                    for m in 0..b {
                        for r in 0..n {
                            let base = (m * n + r) * n;
                            for j in 0..=r {
                                if xv[base + j] > T::zero() {
                                    g[base + j] = g[base + j] + gy[base + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let c = *nodes[logits.0].shape.last().unwrap();
                let scale = gy[0] / T::from_usize(*count).unwrap();
                if let Some(g) = Self::gbuf(nodes, values, grads, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let gr = &mut g[r * c..(r + 1) * c];
                        for (gk, &pk) in gr.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *gk = *gk + scale * pk;
                        }
                        gr[t] = gr[t] - scale;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    g.iter_mut().for_each(|v| *v = *v + gy[0]);
                }
            }
            Op::SumSquares { x } => {
                if let Some(g) = Self::gbuf(nodes, values, grads, *x) {
                    let two = T::lit(2.0) * gy[0];
                    for (gk, &xk) in g.iter_mut().zip(&values[x.0]) {
                        *gk = *gk + two * xk;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Largest relative error between `analytic` and central differences of `f`
/// on `probes` distinct coordinates drawn from `seed`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64, probes: usize, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "finite_diff_check: gradient length");
    if probes == 0 || x.is_empty() {
        return 0.0;
    }
    let mut rng = rng::stream(seed, rng::tag::PROBES);
    let coords = sample(&mut rng, x.len(), probes.min(x.len()));
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for i in coords.iter() {
        let x0 = xp[i];
        xp[i] = x0 + h;
        let fp = f(&xp);
        xp[i] = x0 - h;
        let fm = f(&xp);
        xp[i] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect()
    }

    /// Gradient of `build(graph, leaf)` w.r.t. the leaf, plus finite-difference error.
    fn check_op(x0: Vec<f64>, shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
        let run = |x: &[f64]| {
            let mut g = Graph::new();
            let v = g.param(x.to_vec(), shape).unwrap();
            let y = build(&mut g, v);
            // A random linear functional of the output keeps every entry in play.
            let w = g.constant(seq(g.value(y).len(), 0.77), &g.shape(y).to_vec()).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p).unwrap();
            (g, v, s)
        };
        let (mut g, v, s) = run(&x0);
        g.backward(s).unwrap();
        let grad = g.grad(v).unwrap().to_vec();
        finite_diff_check(|x| { let (g, _, s) = run(x); g.scalar(s) }, &x0, &grad, 1e-4, x0.len(), 1)
    }

    #[test]
    fn sum_and_square_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.param(seq(6, 0.3), &[2, 3]).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

        let q = g.sum_squares(x).unwrap();
        g.backward(q).unwrap();
        for (gi, xi) in g.grad(x).unwrap().iter().zip(g.value(x)) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![1.5, -2.0], &[2]).unwrap();
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        // s = 2 Σ x², ds/dx = 4x
        assert_eq!(g.grad(x).unwrap(), &[6.0, -8.0]);
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let mut g = Graph::<f64>::new();
        let x = g.param(vec![1e200, 1.0], &[2]).unwrap();
        match g.mul(x, x) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "mul"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let x = seq(2 * 3 * 4, 0.41);
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| g.relu(v).unwrap()) < 1e-7);
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| g.scale(v, -1.7).unwrap()) < 1e-7);
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| g.layer_norm(v, 1e-5).unwrap()) < 1e-6);
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| g.transpose_last_two(v).unwrap()) < 1e-7);
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| {
            let s = g.split_heads(v, 2).unwrap();
            let t = g.scale(s, 3.0).unwrap();
            g.merge_heads(t, 2).unwrap()
        }) < 1e-7);
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| {
            let w = g.constant(seq(5 * 4, 0.13), &[5, 4]).unwrap();
            g.matmul(v, w).unwrap()
        }) < 1e-7);
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| {
            let b = g.constant(seq(4, 0.9), &[4]).unwrap();
            let y = g.mul(v, b).unwrap();
            g.add(y, b).unwrap()
        }) < 1e-7);
        // Both operands of a batched product depend on the leaf.
        let e = check_op(x.clone(), &[2, 3, 4], |g, v| g.bmm(v, v, true).unwrap());
        assert!(e < 1e-7, "bmm {e}");
        assert!(check_op(x.clone(), &[2, 3, 4], |g, v| {
            let t = g.transpose_last_two(v).unwrap();
            g.bmm(v, t, false).unwrap()
        }) < 1e-7);
        let sq = seq(2 * 4 * 4, 0.53);
        assert!(check_op(sq.clone(), &[2, 4, 4], |g, v| g.masked_softmax_rows(v).unwrap()) < 1e-7);
        assert!(check_op(sq, &[2, 4, 4], |g, v| g.relu_rows(v).unwrap()) < 1e-7);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let xv = seq(2 * 3 * 4, 0.41);
        let w0 = seq(5 * 4, 0.13);
        let run = |w: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(xv.clone(), &[2, 3, 4]).unwrap();
            let wv = g.param(w.to_vec(), &[5, 4]).unwrap();
            let y = g.matmul(x, wv).unwrap();
            let s = g.sum_squares(y).unwrap();
            (g, wv, s)
        };
        let (mut g, wv, s) = run(&w0);
        g.backward(s).unwrap();
        let grad = g.grad(wv).unwrap().to_vec();
        assert!(finite_diff_check(|w| { let (g, _, s) = run(w); g.scalar(s) }, &w0, &grad, 1e-6, 20, 3) < 1e-7);

        let table = seq(6 * 3, 0.29);
        let ids = [4usize, 1, 4, 0];
        let run = |t: &[f64]| {
            let mut g = Graph::new();
            let tv = g.param(t.to_vec(), &[6, 3]).unwrap();
            let e = g.embedding_gather(tv, &ids, &[2, 2]).unwrap();
            let s = g.sum_squares(e).unwrap();
            (g, tv, s)
        };
        let (mut g, tv, s) = run(&table);
        g.backward(s).unwrap();
        let grad = g.grad(tv).unwrap().to_vec();
        assert!(finite_diff_check(|t| { let (g, _, s) = run(t); g.scalar(s) }, &table, &grad, 1e-6, 18, 3) < 1e-7);
    }

    #[test]
    fn cross_entropy_grad_and_losses() {
        let l0 = seq(3 * 5, 0.7);
        let targets = [1usize, 4, 0];
        let mask = [true, false, true];
        let run = |l: &[f64]| {
            let mut g = Graph::new();
            let lv = g.param(l.to_vec(), &[3, 5]).unwrap();
            let ce = g.cross_entropy_from_logits(lv, &targets, &mask).unwrap();
            (g, lv, ce)
        };
        let (mut g, lv, ce) = run(&l0);
        let losses = g.position_losses(ce).unwrap().to_vec();
        assert_eq!(losses[1], 0.0);
        assert!((g.scalar(ce) - (losses[0] + losses[2]) / 2.0).abs() < 1e-15);
        g.backward(ce).unwrap();
        let grad = g.grad(lv).unwrap().to_vec();
        assert!(grad[5..10].iter().all(|&v| v == 0.0));
        assert!(finite_diff_check(|l| { let (g, _, c) = run(l); g.scalar(c) }, &l0, &grad, 1e-6, 15, 9) < 1e-7);
    }

    #[test]
    fn softmax_rows_and_causality() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(seq(3 * 5 * 5, 1.3).iter().map(|v| 20.0 * v).collect(), &[3, 5, 5]).unwrap();
        let a = g.masked_softmax_rows(x).unwrap();
        let av = g.value(a);
        for m in 0..3 {
            for i in 0..5 {
                let row = &av[(m * 5 + i) * 5..][..5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(vec![3.25; 8], &[1, 8]).unwrap();
        let y = g.layer_norm(c, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let x = g.constant(seq(4 * 16, 0.37).iter().map(|v| 10.0 * v + 2.0).collect(), &[4, 16]).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        for r in g.value(y).chunks(16) {
            let mean = r.iter().sum::<f64>() / 16.0;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.param(vec![0.0; 6], &[2, 3]).unwrap();
        let b = g.param(vec![0.0; 4], &[2, 2]).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Argument(_))));
        assert!(matches!(g.matmul(a, b), Err(Error::Argument(_))));
        assert!(matches!(g.masked_softmax_rows(a), Err(Error::Argument(_))));
        assert!(matches!(g.embedding_gather(a, &[2], &[1]), Err(Error::Argument(_))));
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let x: Vec<f64> = seq(10, 0.5);
        let grad: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
        assert!(finite_diff_check(f, &x, &grad, 1e-4, 10, 0) < 1e-9);
        assert_eq!(finite_diff_check(f, &x, &grad, 1e-4, 0, 0), 0.0);
    }

    #[test]
    fn f32_graph_runs() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = g.layer_norm(x, 1e-5).unwrap();
        let s = g.sum_squares(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-2));
    }
}
