//! Reverse-mode differentiation over a recorded list of operations.
//!
//! Every forward call appends one node holding its output value and enough
//! saved state to compute the adjoint. `Tape::backward` walks the list in
//! reverse. Values are 2-D (`rows × cols`); a 1-D tensor is a single row.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{gemm_into, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous groups over a list of entries. Segment `s` owns entries
/// `offsets[s]..offsets[s + 1]`; empty segments are allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Segments { offsets }
    }

    /// Segments from a sorted list of segment ids, one per entry.
    pub fn from_sorted_ids(ids: &[usize], num_segments: usize) -> Result<Self> {
        let mut lengths = vec![0usize; num_segments];
        let mut prev = 0;
        for &s in ids {
            if s < prev || s >= num_segments {
                return Err(Error::dim("segments", "ids must be sorted and in range"));
            }
            prev = s;
            lengths[s] += 1;
        }
        Ok(Self::from_lengths(lengths))
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }
}

struct GruCache<T> {
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    ghn: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Max(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SumAll(Var),
    RowDot(Var, Var),
    SoftmaxRows(Var, Option<Vec<bool>>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentWeightedSum(Var, Var, Arc<Segments>),
    CrossEntropy(Var, Vec<usize>, Tensor<T>),
    Gru {
        x: Var,
        h: Var,
        wx: Var,
        wh: Var,
        bx: Var,
        bh: Var,
        cache: GruCache<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Build a fresh tape per forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: Vec<(Var, String)>,
    bound_index: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn col_sums_into<T: Scalar>(src: &[T], cols: usize, dst: &mut [T]) {
    for row in src.chunks_exact(cols) {
        for (d, &s) in dst.iter_mut().zip(row) {
            *d += s;
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: Vec::new(),
            bound_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => self.inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Max(a, b)
            | Op::RowDot(a, b)
            | Op::SegmentWeightedSum(a, b, _) => vec![*a, *b],
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::SumAll(a)
            | Op::SoftmaxRows(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::CrossEntropy(a, _, _) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Gru {
                x,
                h,
                wx,
                wh,
                bx,
                bh,
                ..
            } => vec![*x, *h, *wx, *wh, *bx, *bh],
        }
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf that is not tied to a [`ParamStore`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound_index.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Lookup {
                kind: "parameter",
                id: name.to_string(),
            })?
            .clone();
        let v = self.leaf(value);
        self.bound.push((v, name.to_string()));
        self.bound_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn bindings(&self) -> &[(Var, String)] {
        &self.bound
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            k,
            n,
            false,
            T::zero(),
            &mut out,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).len(), self.value(b).len());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa} vs {sb} elements")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("max", a, b)?;
        let out = self.zip_with(a, b, |x, y| if x >= y { x } else { y });
        self.push(out, Op::Max(a, b), "max")
    }

    /// Sum of one or more same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::dim("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `a[n×m] + bias[m]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.value(bias).len() != m {
            return Err(Error::dim(
                "add_row",
                format!("bias of {} for {m} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for r in 0..n {
            for (x, &y) in out.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, bias), "add_row")
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return Err(Error::dim("mul_const", "length mismatch"));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::MulConst(a, c), "mul_const")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let rows = vars
            .first()
            .map(|&v| self.dims(v).0)
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        if vars.iter().any(|&v| self.dims(v).0 != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = vars.iter().map(|&v| self.dims(v).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in vars {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(vars.to_vec()),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let cols = vars
            .first()
            .map(|&v| self.dims(v).1)
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        if vars.iter().any(|&v| self.dims(v).1 != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let rows: usize = vars.iter().map(|&v| self.dims(v).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &v in vars {
            out.extend_from_slice(self.value(v).data());
        }
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(vars.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if start + len > cols {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(
            Tensor::matrix(rows, len, out)?,
            Op::SliceCols(a, start),
            "slice_cols",
        )
    }

    /// Same data viewed as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a);
        if v.len() != rows * cols {
            return Err(Error::dim("reshape", format!("{} values into {rows}x{cols}", v.len())));
        }
        let out = Tensor::matrix(rows, cols, v.data().to_vec())?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Row lookup; indices may repeat (embedding lookup, edge endpoints).
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<Vec<usize>>>) -> Result<Var> {
        let idx = idx.into();
        let (rows, cols) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {rows}")));
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(va.row(i));
        }
        self.push(
            Tensor::matrix(idx.len(), cols, out)?,
            Op::GatherRows(a, idx),
            "gather_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Per-row inner product of two `[n×d]` nodes, giving `[n×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims(a);
        if self.dims(b) != (n, d) {
            return Err(Error::dim("row_dot", format!("{:?} vs {:?}", (n, d), self.dims(b))));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..n)
            .map(|r| va.row(r).iter().zip(vb.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        self.push(Tensor::matrix(n, 1, out)?, Op::RowDot(a, b), "row_dot")
    }

    /// Row-wise softmax over the last axis. Masked columns (`false`) are
    /// exactly zero and the rest sum to one.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if cols == 0 {
            return Err(Error::dim("softmax", "empty last axis"));
        }
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::dim("softmax", format!("mask {} vs {cols}", m.len())));
            }
            if !m.iter().any(|&x| x) {
                return Err(Error::InvalidMask);
            }
        }
        let va = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let x = va.row(r);
            let keep = |j: usize| mask.map_or(true, |m| m[j]);
            let mx = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| x[j])
                .fold(T::neg_infinity(), T::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for j in (0..cols).filter(|&j| keep(j)) {
                o[j] = (x[j] - mx).exp();
                z += o[j];
            }
            for v in o.iter_mut() {
                *v = *v / z;
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::SoftmaxRows(a, mask.map(<[bool]>::to_vec)),
            "softmax",
        )
    }

    /// Softmax inside each segment of a column of scores (`[N]` or `[N×1]`).
    /// Entries of empty segments do not exist, so nothing is masked here.
    pub fn segment_softmax(&mut self, a: Var, seg: &Arc<Segments>) -> Result<Var> {
        let va = self.value(a);
        if va.len() != seg.num_entries() {
            return Err(Error::dim(
                "segment_softmax",
                format!("{} scores for {} entries", va.len(), seg.num_entries()),
            ));
        }
        let x = va.data();
        let mut out = vec![T::zero(); x.len()];
        for s in 0..seg.num_segments() {
            let r = seg.range(s);
            if r.is_empty() {
                continue;
            }
            let mx = x[r.clone()].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in r.clone() {
                out[e] = (x[e] - mx).exp();
                z += out[e];
            }
            for e in r {
                out[e] = out[e] / z;
            }
        }
        let shape = va.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax(a, Arc::clone(seg)),
            "segment_softmax",
        )
    }

    /// `out[s] = Σ_{e ∈ s} w[e] · x[e]`; empty segments give zero rows.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var, seg: &Arc<Segments>) -> Result<Var> {
        let (n, d) = self.dims(x);
        if n != seg.num_entries() || self.value(w).len() != n {
            return Err(Error::dim("segment_weighted_sum", "entry counts differ"));
        }
        let (vw, vx) = (self.value(w).data(), self.value(x));
        let mut out = vec![T::zero(); seg.num_segments() * d];
        for s in 0..seg.num_segments() {
            let o = &mut out[s * d..(s + 1) * d];
            for e in seg.range(s) {
                let we = vw[e];
                for (oo, &xx) in o.iter_mut().zip(vx.row(e)) {
                    *oo += we * xx;
                }
            }
        }
        self.push(
            Tensor::matrix(seg.num_segments(), d, out)?,
            Op::SegmentWeightedSum(w, x, Arc::clone(seg)),
            "segment_weighted_sum",
        )
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(Error::dim("cross_entropy", "targets do not fit logits"));
        }
        let v = self.value(logits);
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for r in 0..rows {
            let x = v.row(r);
            let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = x.iter().map(|&xi| (xi - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..cols {
                probs[r * cols + j] = (x[j] - lz).exp();
            }
            loss += lz - x[targets[r]];
        }
        let loss = loss / T::of(rows as f64);
        let probs = Tensor::matrix(rows, cols, probs)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            "cross_entropy",
        )
    }

    /// One GRU step for the first `x.rows()` rows of `h`; the remaining rows
    /// of `h` pass through unchanged (finished sequences).
    ///
    /// Gate columns are laid out `[reset | update | candidate]`:
    /// `r = σ(x Wxr + bxr + h Whr + bhr)`, `z = σ(·)`,
    /// `c = tanh(x Wxc + bxc + r ⊙ (h Whc + bhc))`, `h' = (1 − z) ⊙ h + z ⊙ c`.
    pub fn gru_cell(&mut self, x: Var, h: Var, p: GruVars) -> Result<Var> {
        let (active, din) = self.dims(x);
        let (n, dh) = self.dims(h);
        if active > n {
            return Err(Error::dim("gru_cell", format!("{active} inputs for {n} states")));
        }
        if self.dims(p.wx) != (din, 3 * dh)
            || self.dims(p.wh) != (dh, 3 * dh)
            || self.value(p.bx).len() != 3 * dh
            || self.value(p.bh).len() != 3 * dh
        {
            return Err(Error::dim(
                "gru_cell",
                format!("parameters do not match d_in={din}, d_h={dh}"),
            ));
        }
        let g3 = 3 * dh;
        let mut gx = vec![T::zero(); active * g3];
        let mut gh = vec![T::zero(); active * g3];
        let hv = self.value(h).data();
        gemm_into(
            self.value(x).data(),
            active,
            din,
            false,
            self.value(p.wx).data(),
            din,
            g3,
            false,
            T::zero(),
            &mut gx,
        );
        gemm_into(
            &hv[..active * dh],
            active,
            dh,
            false,
            self.value(p.wh).data(),
            dh,
            g3,
            false,
            T::zero(),
            &mut gh,
        );
        let bx = self.value(p.bx).data();
        let bh = self.value(p.bh).data();
        let mut r = vec![T::zero(); active * dh];
        let mut z = vec![T::zero(); active * dh];
        let mut c = vec![T::zero(); active * dh];
        let mut ghn = vec![T::zero(); active * dh];
        let mut out = hv.to_vec();
        for i in 0..active {
            let gxi = &gx[i * g3..(i + 1) * g3];
            let ghi = &gh[i * g3..(i + 1) * g3];
            for j in 0..dh {
                let k = i * dh + j;
                let rr = sigmoid(gxi[j] + bx[j] + ghi[j] + bh[j]);
                let zz = sigmoid(gxi[dh + j] + bx[dh + j] + ghi[dh + j] + bh[dh + j]);
                let hn = ghi[2 * dh + j] + bh[2 * dh + j];
                let cc = (gxi[2 * dh + j] + bx[2 * dh + j] + rr * hn).tanh();
                r[k] = rr;
                z[k] = zz;
                c[k] = cc;
                ghn[k] = hn;
                out[k] = (T::one() - zz) * hv[k] + zz * cc;
            }
        }
        self.push(
            Tensor::matrix(n, dh, out)?,
            Op::Gru {
                x,
                h,
                wx: p.wx,
                wh: p.wh,
                bx: p.bx,
                bh: p.bh,
                cache: GruCache { r, z, n: c, ghn },
            },
            "gru_cell",
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        let wants = |v: &Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0]
                    .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()))
                    .data_mut()
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.cols();
                if wants(a) {
                    let bv = nodes[b.0].value.data();
                    gemm_into(gd, m, n, false, bv, k, n, true, T::one(), acc!(*a));
                }
                if wants(b) {
                    let av = nodes[a.0].value.data();
                    gemm_into(av, m, k, true, gd, m, n, false, T::one(), acc!(*b));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(acc!(*v), gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc!(*a), gd);
                }
                if wants(b) {
                    for (d, &x) in acc!(*b).iter_mut().zip(gd) {
                        *d -= x;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if wants(a) {
                    add_into(acc!(*a), gd);
                }
                if wants(b) {
                    let cols = node.value.cols();
                    col_sums_into(gd, cols, acc!(*b));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = nodes[b.0].value.data();
                    for ((d, &x), &y) in acc!(*a).iter_mut().zip(gd).zip(bv) {
                        *d += x * y;
                    }
                }
                if wants(b) {
                    let av = nodes[a.0].value.data();
                    for ((d, &x), &y) in acc!(*b).iter_mut().zip(gd).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::MulConst(a, c) => {
                for ((d, &x), &y) in acc!(*a).iter_mut().zip(gd).zip(c.data()) {
                    *d += x * y;
                }
            }
            Op::Scale(a, s) => {
                for (d, &x) in acc!(*a).iter_mut().zip(gd) {
                    *d += x * *s;
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                for ((d, &x), &yy) in acc!(*a).iter_mut().zip(gd).zip(y) {
                    *d += x * yy * (T::one() - yy);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                for ((d, &x), &yy) in acc!(*a).iter_mut().zip(gd).zip(y) {
                    *d += x * (T::one() - yy * yy);
                }
            }
            Op::Max(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(a) {
                    let da = acc!(*a);
                    for i in 0..gd.len() {
                        if av[i] >= bv[i] {
                            da[i] += gd[i];
                        }
                    }
                }
                if wants(b) {
                    let db = acc!(*b);
                    for i in 0..gd.len() {
                        if av[i] < bv[i] {
                            db[i] += gd[i];
                        }
                    }
                }
            }
            Op::ConcatCols(vs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for v in vs {
                    let w = nodes[v.0].value.cols();
                    if wants(v) {
                        let d = acc!(*v);
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &gd[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(vs) => {
                let mut off = 0;
                for v in vs {
                    let n = nodes[v.0].value.len();
                    if wants(v) {
                        add_into(acc!(*v), &gd[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = node.value.dims2();
                let cols = nodes[a.0].value.cols();
                let d = acc!(*a);
                for r in 0..rows {
                    add_into(
                        &mut d[r * cols + start..r * cols + start + len],
                        &gd[r * len..(r + 1) * len],
                    );
                }
            }
            Op::Reshape(a) => add_into(acc!(*a), gd),
            Op::GatherRows(a, idx) => {
                let cols = node.value.cols();
                let d = acc!(*a);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * cols..(i + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                }
            }
            Op::SumAll(a) => {
                let s = gd[0];
                for d in acc!(*a).iter_mut() {
                    *d += s;
                }
            }
            Op::RowDot(a, b) => {
                let d = nodes[a.0].value.cols();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(a) {
                    let da = acc!(*a);
                    for (r, &gr) in gd.iter().enumerate() {
                        for j in 0..d {
                            da[r * d + j] += gr * bv[r * d + j];
                        }
                    }
                }
                if wants(b) {
                    let db = acc!(*b);
                    for (r, &gr) in gd.iter().enumerate() {
                        for j in 0..d {
                            db[r * d + j] += gr * av[r * d + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a, mask) => {
                let (rows, cols) = node.value.dims2();
                let y = node.value.data();
                let d = acc!(*a);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..cols {
                        if mask.as_ref().map_or(true, |m| m[j]) {
                            d[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = node.value.data();
                let d = acc!(*a);
                for s in 0..seg.num_segments() {
                    let rg = seg.range(s);
                    let dot: T = rg.clone().map(|e| y[e] * gd[e]).sum();
                    for e in rg {
                        d[e] += y[e] * (gd[e] - dot);
                    }
                }
            }
            Op::SegmentWeightedSum(w, x, seg) => {
                let dcols = node.value.cols();
                let wv = nodes[w.0].value.data();
                let xv = &nodes[x.0].value;
                if wants(w) {
                    let dw = acc!(*w);
                    for s in 0..seg.num_segments() {
                        let gs = &gd[s * dcols..(s + 1) * dcols];
                        for e in seg.range(s) {
                            dw[e] += gs.iter().zip(xv.row(e)).map(|(&p, &q)| p * q).sum();
                        }
                    }
                }
                if wants(x) {
                    let dx = acc!(*x);
                    for s in 0..seg.num_segments() {
                        let gs = &gd[s * dcols..(s + 1) * dcols];
                        for e in seg.range(s) {
                            let we = wv[e];
                            for (dd, &gg) in dx[e * dcols..(e + 1) * dcols].iter_mut().zip(gs) {
                                *dd += we * gg;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy(a, targets, probs) => {
                let (rows, cols) = probs.dims2();
                let scale = gd[0] / T::of(rows as f64);
                let d = acc!(*a);
                for r in 0..rows {
                    for j in 0..cols {
                        let mut p = probs.data()[r * cols + j];
                        if j == targets[r] {
                            p -= T::one();
                        }
                        d[r * cols + j] += p * scale;
                    }
                }
            }
            Op::Gru {
                x,
                h,
                wx,
                wh,
                bx,
                bh,
                cache,
            } => self.backprop_gru(gd, [*x, *h, *wx, *wh, *bx, *bh], cache, grads),
        }
    }

    fn backprop_gru(
        &self,
        gd: &[T],
        [x, h, wx, wh, bx, bh]: [Var; 6],
        cache: &GruCache<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let nodes = &self.nodes;
        let (active, din) = nodes[x.0].value.dims2();
        let dh = nodes[h.0].value.cols();
        let g3 = 3 * dh;
        let hv = nodes[h.0].value.data();
        let mut dgx = vec![T::zero(); active * g3];
        let mut dgh = vec![T::zero(); active * g3];
        let mut dh_direct = vec![T::zero(); active * dh];
        for i in 0..active {
            for j in 0..dh {
                let k = i * dh + j;
                let (r, z, c, hn) = (cache.r[k], cache.z[k], cache.n[k], cache.ghn[k]);
                let go = gd[k];
                let dz = go * (c - hv[k]);
                let dc = go * z;
                dh_direct[k] = go * (T::one() - z);
                let dc_pre = dc * (T::one() - c * c);
                let dr = dc_pre * hn;
                let dr_pre = dr * r * (T::one() - r);
                let dz_pre = dz * z * (T::one() - z);
                let base = i * g3;
                dgx[base + j] = dr_pre;
                dgx[base + dh + j] = dz_pre;
                dgx[base + 2 * dh + j] = dc_pre;
                dgh[base + j] = dr_pre;
                dgh[base + dh + j] = dz_pre;
                dgh[base + 2 * dh + j] = dc_pre * r;
            }
        }
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0]
                    .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()))
                    .data_mut()
            }};
        }
        let wants = |v: Var| nodes[v.0].requires_grad;
        if wants(x) {
            let w = nodes[wx.0].value.data();
            gemm_into(&dgx, active, g3, false, w, din, g3, true, T::one(), acc!(x));
        }
        if wants(wx) {
            let xv = nodes[x.0].value.data();
            gemm_into(xv, active, din, true, &dgx, active, g3, false, T::one(), acc!(wx));
        }
        if wants(bx) {
            col_sums_into(&dgx, g3, acc!(bx));
        }
        if wants(wh) {
            gemm_into(
                &hv[..active * dh],
                active,
                dh,
                true,
                &dgh,
                active,
                g3,
                false,
                T::one(),
                acc!(wh),
            );
        }
        if wants(bh) {
            col_sums_into(&dgh, g3, acc!(bh));
        }
        if wants(h) {
            let w = nodes[wh.0].value.data();
            let d = acc!(h);
            add_into(&mut d[..active * dh], &dh_direct);
            gemm_into(&dgh, active, g3, false, w, dh, g3, true, T::one(), &mut d[..active * dh]);
            add_into(&mut d[active * dh..], &gd[active * dh..]);
        }
    }
}

/// Parameter nodes of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wx: Var,
    pub wh: Var,
    pub bx: Var,
    pub bh: Var,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
