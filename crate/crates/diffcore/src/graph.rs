//! Recording tape and the operator set.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//!
//! Shape rules (no implicit broadcasting anywhere):
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `matmul` | `[n,k]`, `[k,m]` | `[n,m]` |
//! | `add`, `mul` | same shape | same shape |
//! | `add_bias` | `[..,d]`, `[d]` | `[..,d]` |
//! | `softmax_masked` | `[..,d]` + additive mask of equal shape | `[..,d]` |
//! | `layer_norm` | `[..,d]`, gain `[d]`, bias `[d]` | `[..,d]` |
//! | `embedding` | table `[v,d]`, `n` indices | `[n,d]` |
//! | `bmm_nt` | `[b,n,d]`, `[b,m,d]` | `[b,n,m]` |
//! | `bmm` | `[b,n,m]`, `[b,m,d]` | `[b,n,d]` |
//! | `interleave_rows` | `p` arrays `[n,d]` | `[n*p,d]` |
//! | `select_rows` | `[..,d]` viewed as rows | `[r,d]` |
//! | `slice_cols` / `concat_cols` | `[..,d]` | `[..,w]` |
//! | `mse` | `[..,d]` + constant target | `[1]` |

use crate::{DiffError, NdArray, Real, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxMasked(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: NdArray<T>,
        row_weights: Option<Vec<T>>,
        denom: T,
    },
    Reshape(Var),
    BmmNt(Var, Var),
    Bmm(Var, Var),
    Interleave(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: NdArray<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (data, masks, fixed inputs).
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: NdArray<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: NdArray<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions)
            && !value.is_finite()
            && inputs.iter().all(|&v| self.nodes[v.0].value.is_finite())
        {
            return Err(DiffError::Contract(format!(
                "{name} produced a non-finite value from finite inputs"
            )));
        }
        let requires_grad = inputs.iter().any(|&v| self.req(v));
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// `[n,k] @ [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (m as isize, 1),
            T::zero(),
            &mut out,
            (m as isize, 1),
        );
        let value = NdArray::new(vec![n, m], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<NdArray<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::shape(name, sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        NdArray::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != sb.last() {
            return Err(DiffError::shape("add_bias", sx, sb));
        }
        let d = sb[0];
        let bias = self.data(b);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, &c) in row.iter_mut().zip(bias) {
                *v = *v + c;
            }
        }
        let value = NdArray::new(sx.to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// Softmax over the last axis of `x + mask`.
    ///
    /// Mask entries are `0` or `-inf`; masked positions get exactly zero
    /// weight. A row whose entries are all masked yields all zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: &NdArray<T>) -> Result<Var> {
        let sx = self.shape(x);
        if sx != mask.shape() {
            return Err(DiffError::shape("softmax_masked", sx, mask.shape()));
        }
        let d = *sx.last().unwrap();
        let mut out = vec![T::zero(); self.value(x).len()];
        for ((row, mrow), orow) in self
            .data(x)
            .chunks_exact(d)
            .zip(mask.data().chunks_exact(d))
            .zip(out.chunks_exact_mut(d))
        {
            let mut max = T::neg_infinity();
            for (&v, &m) in row.iter().zip(mrow) {
                if m == T::neg_infinity() {
                    continue;
                }
                max = max.max(v + m);
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for ((&v, &m), o) in row.iter().zip(mrow).zip(orow.iter_mut()) {
                if m == T::neg_infinity() {
                    continue;
                }
                let e = (v + m - max).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            orow.iter_mut().for_each(|o| *o = *o * inv);
        }
        let value = NdArray::new(sx.to_vec(), out)?;
        self.push("softmax_masked", value, Op::SoftmaxMasked(x), &[x])
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then
    /// applies the affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(DiffError::shape("layer_norm", &sx, self.shape(gain)));
        }
        let n = self.value(x).len() / d;
        let eps = T::from_f64(LN_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        let (g, b) = (self.data(gain), self.data(bias));
        for (i, row) in self.data(x).chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let value = NdArray::new(sx, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Gathers rows of `table` by integer index.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(DiffError::shape("embedding", st, &[indices.len()]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(DiffError::Contract(format!(
                "embedding index {bad} out of range for table with {v} rows"
            )));
        }
        if indices.is_empty() {
            return Err(DiffError::Contract("embedding lookup with no indices".into()));
        }
        let t = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = NdArray::new(vec![indices.len(), d], data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Mean squared error against a constant target, averaged over all
    /// elements.
    pub fn mse(&mut self, pred: Var, target: &NdArray<T>) -> Result<Var> {
        self.mse_rows(pred, target, None)
    }

    /// Mean squared error where each row of `pred` (last axis = features)
    /// carries a weight; the mean is taken over the weighted element count.
    pub fn mse_rows(&mut self, pred: Var, target: &NdArray<T>, row_weights: Option<&[T]>) -> Result<Var> {
        let sp = self.shape(pred);
        if sp != target.shape() {
            return Err(DiffError::shape("mse", sp, target.shape()));
        }
        let d = *sp.last().unwrap();
        let rows = target.len() / d;
        if let Some(w) = row_weights {
            if w.len() != rows {
                return Err(DiffError::shape("mse", sp, &[w.len()]));
            }
        }
        let weight = |i: usize| row_weights.map_or(T::one(), |w| w[i]);
        let total_weight: T = (0..rows).map(weight).sum();
        if total_weight <= T::zero() {
            return Err(DiffError::Contract("mse over zero total weight".into()));
        }
        let denom = total_weight * T::from_f64(d as f64);
        let mut sum = T::zero();
        for (i, (p, t)) in self
            .data(pred)
            .chunks_exact(d)
            .zip(target.data().chunks_exact(d))
            .enumerate()
        {
            let w = weight(i);
            if w == T::zero() {
                continue;
            }
            let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
            sum = sum + w * s;
        }
        let value = NdArray::scalar(sum / denom);
        self.push(
            "mse",
            value,
            Op::Mse {
                pred,
                target: target.clone(),
                row_weights: row_weights.map(|w| w.to_vec()),
                denom,
            },
            &[pred],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    fn batch_dims(&self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(DiffError::shape(name, sa, sb));
        }
        Ok((sa[0], sa[1], sa[2], sb[1], sb[2]))
    }

    /// Batched `a @ b^T`: `[b,n,d] x [b,m,d] -> [b,n,m]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, n, d, m, d2) = self.batch_dims("bmm_nt", a, b)?;
        if d != d2 {
            return Err(DiffError::shape("bmm_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); batch * n * m];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            T::gemm(
                n,
                d,
                m,
                T::one(),
                &da[i * n * d..(i + 1) * n * d],
                (d as isize, 1),
                &db[i * m * d..(i + 1) * m * d],
                (1, d as isize),
                T::zero(),
                &mut out[i * n * m..(i + 1) * n * m],
                (m as isize, 1),
            );
        }
        let value = NdArray::new(vec![batch, n, m], out)?;
        self.push("bmm_nt", value, Op::BmmNt(a, b), &[a, b])
    }

    /// Batched `p @ v`: `[b,n,m] x [b,m,d] -> [b,n,d]`.
    ///
    /// Zero weights in `p` are skipped outright, so rows of `v` that a row of
    /// `p` does not weight cannot influence the result, not even through
    /// signed zeros.
    pub fn bmm(&mut self, p: Var, v: Var) -> Result<Var> {
        let (batch, n, m, m2, d) = self.batch_dims("bmm", p, v)?;
        if m != m2 {
            return Err(DiffError::shape("bmm", self.shape(p), self.shape(v)));
        }
        let mut out = vec![T::zero(); batch * n * d];
        let (dp, dv) = (self.data(p), self.data(v));
        for b in 0..batch {
            for i in 0..n {
                let orow = &mut out[(b * n + i) * d..(b * n + i + 1) * d];
                for j in 0..m {
                    let w = dp[(b * n + i) * m + j];
                    if w == T::zero() {
                        continue;
                    }
                    let vrow = &dv[(b * m + j) * d..(b * m + j + 1) * d];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o = *o + w * x;
                    }
                }
            }
        }
        let value = NdArray::new(vec![batch, n, d], out)?;
        self.push("bmm", value, Op::Bmm(p, v), &[p, v])
    }

    /// Interleaves rows: output row `i * parts.len() + p` is row `i` of
    /// `parts[p]`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Contract("interleave of zero arrays".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 {
            return Err(DiffError::shape("interleave_rows", &s0, &[]));
        }
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(DiffError::shape("interleave_rows", &s0, self.shape(p)));
            }
        }
        let (n, d) = (s0[0], s0[1]);
        let k = parts.len();
        let mut out = vec![T::zero(); n * k * d];
        for (pi, &p) in parts.iter().enumerate() {
            for (i, row) in self.data(p).chunks_exact(d).enumerate() {
                out[(i * k + pi) * d..(i * k + pi + 1) * d].copy_from_slice(row);
            }
        }
        let value = NdArray::new(vec![n * k, d], out)?;
        self.push("interleave_rows", value, Op::Interleave(parts.to_vec()), parts)
    }

    /// Picks rows (last axis = row contents) into a `[rows.len(), d]` array.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if rows.is_empty() {
            return Err(DiffError::Contract("select_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(DiffError::Contract(format!("row {bad} out of range for {n} rows")));
        }
        let src = xv.data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = NdArray::new(vec![rows.len(), d], data)?;
        self.push("select_rows", value, Op::SelectRows(x, rows.to_vec()), &[x])
    }

    /// Columns `start..start + width` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if width == 0 || start + width > d {
            return Err(DiffError::shape("slice_cols", &sx, &[start, width]));
        }
        let mut data = Vec::with_capacity(self.data(x).len() / d * width);
        for row in self.data(x).chunks_exact(d) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = width;
        let value = NdArray::new(shape, data)?;
        self.push("slice_cols", value, Op::SliceCols(x, start), &[x])
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Contract("concat of zero arrays".into()))?;
        let s0 = self.shape(first).to_vec();
        let lead = &s0[..s0.len() - 1];
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len() || &sp[..sp.len() - 1] != lead {
                return Err(DiffError::shape("concat_cols", &s0, sp));
            }
            total += sp[sp.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let w = self.value(p).cols();
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = s0;
        *shape.last_mut().unwrap() = total;
        let value = NdArray::new(shape, out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let trainable = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            trainable,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.req(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        self.accumulate(grads, v, |dst| {
            dst.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
        });
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                self.accumulate(grads, *a, |da| {
                    // dA += dC @ B^T
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g,
                        (m as isize, 1),
                        self.data(*b),
                        (1, m as isize),
                        T::one(),
                        da,
                        (k as isize, 1),
                    );
                });
                self.accumulate(grads, *b, |db| {
                    // dB += A^T @ dC
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        self.data(*a),
                        (1, k as isize),
                        g,
                        (m as isize, 1),
                        T::one(),
                        db,
                        (m as isize, 1),
                    );
                });
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |da| {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d = *d + gi * y;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(va) {
                        *d = *d + gi * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d = *d + gi * *s;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.add_into(grads, *x, g);
                let d = self.shape(*b)[0];
                self.accumulate(grads, *b, |db| {
                    for row in g.chunks_exact(d) {
                        for (acc, &gi) in db.iter_mut().zip(row) {
                            *acc = *acc + gi;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.data(*x);
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(vx) {
                        if xi > T::zero() {
                            *d = *d + gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d = *d + gi * (T::one() - y * y);
                    }
                });
            }
            Op::SoftmaxMasked(x) => {
                let d = out.cols();
                self.accumulate(grads, *x, |dx| {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(out.data().chunks_exact(d))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dd, &gi), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd = *dd + y * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gv = self.data(*gain);
                self.accumulate(grads, *gain, |dg| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((acc, &gi), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *acc = *acc + gi * h;
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for grow in g.chunks_exact(d) {
                        for (acc, &gi) in db.iter_mut().zip(grow) {
                            *acc = *acc + gi;
                        }
                    }
                });
                let inv_d = T::one() / T::from_f64(d as f64);
                self.accumulate(grads, *x, |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for (i, ((drow, grow), hrow)) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_dh = mean_dh + dxhat[j];
                            mean_dh_h = mean_dh_h + dxhat[j] * hrow[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            drow[j] = drow[j] + rstd[i] * (dxhat[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = out.cols();
                self.accumulate(grads, *table, |dt| {
                    for (&idx, grow) in indices.iter().zip(g.chunks_exact(d)) {
                        for (acc, &gi) in dt[idx * d..(idx + 1) * d].iter_mut().zip(grow) {
                            *acc = *acc + gi;
                        }
                    }
                });
            }
            Op::Mse {
                pred,
                target,
                row_weights,
                denom,
            } => {
                let d = target.cols();
                let scale = g[0] * T::from_f64(2.0) / *denom;
                let vp = self.data(*pred);
                self.accumulate(grads, *pred, |dp| {
                    for (i, ((drow, prow), trow)) in dp
                        .chunks_exact_mut(d)
                        .zip(vp.chunks_exact(d))
                        .zip(target.data().chunks_exact(d))
                        .enumerate()
                    {
                        let w = row_weights.as_ref().map_or(T::one(), |w| w[i]);
                        if w == T::zero() {
                            continue;
                        }
                        for ((dd, &p), &t) in drow.iter_mut().zip(prow).zip(trow) {
                            *dd = *dd + scale * w * (p - t);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.add_into(grads, *x, g),
            Op::BmmNt(a, b) => {
                let (batch, n, d) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let m = self.shape(*b)[1];
                let (va, vb) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |da| {
                    for i in 0..batch {
                        // dA = dC @ B
                        T::gemm(
                            n,
                            m,
                            d,
                            T::one(),
                            &g[i * n * m..(i + 1) * n * m],
                            (m as isize, 1),
                            &vb[i * m * d..(i + 1) * m * d],
                            (d as isize, 1),
                            T::one(),
                            &mut da[i * n * d..(i + 1) * n * d],
                            (d as isize, 1),
                        );
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..batch {
                        // dB = dC^T @ A
                        T::gemm(
                            m,
                            n,
                            d,
                            T::one(),
                            &g[i * n * m..(i + 1) * n * m],
                            (1, m as isize),
                            &va[i * n * d..(i + 1) * n * d],
                            (d as isize, 1),
                            T::one(),
                            &mut db[i * m * d..(i + 1) * m * d],
                            (d as isize, 1),
                        );
                    }
                });
            }
            Op::Bmm(p, v) => {
                let (batch, n, m) = (self.shape(*p)[0], self.shape(*p)[1], self.shape(*p)[2]);
                let d = self.shape(*v)[2];
                let (vp, vv) = (self.data(*p), self.data(*v));
                self.accumulate(grads, *p, |dp| {
                    for i in 0..batch {
                        // dP = dC @ V^T
                        T::gemm(
                            n,
                            d,
                            m,
                            T::one(),
                            &g[i * n * d..(i + 1) * n * d],
                            (d as isize, 1),
                            &vv[i * m * d..(i + 1) * m * d],
                            (1, d as isize),
                            T::one(),
                            &mut dp[i * n * m..(i + 1) * n * m],
                            (m as isize, 1),
                        );
                    }
                });
                self.accumulate(grads, *v, |dv| {
                    for b in 0..batch {
                        for i in 0..n {
                            let grow = &g[(b * n + i) * d..(b * n + i + 1) * d];
                            for j in 0..m {
                                let w = vp[(b * n + i) * m + j];
                                if w == T::zero() {
                                    continue;
                                }
                                let drow = &mut dv[(b * m + j) * d..(b * m + j + 1) * d];
                                for (dd, &gi) in drow.iter_mut().zip(grow) {
                                    *dd = *dd + w * gi;
                                }
                            }
                        }
                    }
                });
            }
            Op::Interleave(parts) => {
                let d = out.cols();
                let k = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, |dp| {
                        for (i, drow) in dp.chunks_exact_mut(d).enumerate() {
                            let src = &g[(i * k + pi) * d..(i * k + pi + 1) * d];
                            for (dd, &gi) in drow.iter_mut().zip(src) {
                                *dd = *dd + gi;
                            }
                        }
                    });
                }
            }
            Op::SelectRows(x, rows) => {
                let d = out.cols();
                self.accumulate(grads, *x, |dx| {
                    for (&r, grow) in rows.iter().zip(g.chunks_exact(d)) {
                        for (dd, &gi) in dx[r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *dd = *dd + gi;
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let w = out.cols();
                let d = self.value(*x).cols();
                self.accumulate(grads, *x, |dx| {
                    for (drow, grow) in dx.chunks_exact_mut(d).zip(g.chunks_exact(w)) {
                        for (dd, &gi) in drow[*start..*start + w].iter_mut().zip(grow) {
                            *dd = *dd + gi;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |dp| {
                        for (drow, grow) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            for (dd, &gi) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                                *dd = *dd + gi;
                            }
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

/// Result of a backward pass: gradients for every trainable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable leaf. Leaves the loss does not depend on get
    /// an all-zero gradient.
    pub fn get(&self, v: Var) -> Result<NdArray<T>> {
        if !self.trainable.get(v.0).copied().unwrap_or(false) {
            return Err(DiffError::Contract(format!(
                "node {} is not a trainable leaf",
                v.0
            )));
        }
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => NdArray::new(shape, g.clone()),
            None => Ok(NdArray::zeros(&shape)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray<f64> {
        NdArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::<f64>::zeros(&[2, 3]));
        let b = g.constant(NdArray::<f64>::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(arr(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut g = Graph::new();
        let x = g.constant(arr(&[2], &[0.0, 0.0]));
        let y = g.softmax_masked(x, &NdArray::zeros(&[2])).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_mask_gives_exact_zero() {
        let mut g = Graph::new();
        let x = g.constant(arr(&[2, 3], &[5.0, 1.0, 100.0, 0.0, 0.0, 0.0]));
        let ninf = f64::NEG_INFINITY;
        let mask = arr(&[2, 3], &[0.0, 0.0, ninf, ninf, ninf, ninf]);
        let y = g.softmax_masked(x, &mask).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mse_gradient_of_square() {
        let mut g = Graph::new();
        let x = g.param(arr(&[1], &[3.0]));
        let loss = g.mse(x, &NdArray::zeros(&[1])).unwrap();
        assert_eq!(g.value(loss).data(), &[9.0]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(arr(&[2], &[1.0, 2.0]));
        let p = g.param(arr(&[3], &[1.0, 1.0, 1.0]));
        let loss = g.mse(x, &NdArray::zeros(&[2])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(arr(&[2], &[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(DiffError::Contract(_))));
    }

    #[test]
    fn interleave_then_select_round_trips() {
        let mut g = Graph::new();
        let a = g.constant(arr(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(arr(&[2, 1], &[10.0, 20.0]));
        let c = g.interleave_rows(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 10.0, 2.0, 20.0]);
        let s = g.select_rows(c, &[1, 3]).unwrap();
        assert_eq!(g.value(s).data(), &[10.0, 20.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::new();
        let t = g.param(NdArray::<f32>::zeros(&[3, 2]));
        assert!(g.embedding(t, &[0, 3]).is_err());
    }
}
