//! Dense row-major matrices and a reverse-mode tape over them.
//!
//! A [`Graph`] records operations as they run and replays them backwards in
//! [`Graph::backward`]. Parameters live outside the tape in a [`ParamStore`]
//! so that many graphs (one per sample) can read them while their gradients
//! are summed into the store afterwards.
//!
//! Loss operations compute their input gradient during the forward pass and
//! cache it; the backward pass only scales the cached value.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Strided view used to describe gemm operands.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn of(m: &Matrix, transposed: bool) -> Self {
        if transposed {
            View {
                rows: m.cols,
                cols: m.rows,
                rs: 1,
                cs: m.cols as isize,
            }
        } else {
            View {
                rows: m.rows,
                cols: m.cols,
                rs: m.cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over raw strided buffers.
#[allow(clippy::too_many_arguments)]
fn gemm_raw(
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    crs: isize,
    ccs: isize,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    // Bounds: the caller guarantees the strided extents lie inside each slice.
    debug_assert!(k == 0 || (m - 1) as isize * av.rs + (k - 1) as isize * av.cs < a.len() as isize);
    debug_assert!(k == 0 || (k - 1) as isize * bv.rs + (n - 1) as isize * bv.cs < b.len() as isize);
    debug_assert!((m - 1) as isize * crs + (n - 1) as isize * ccs < c.len() as isize);
    // SAFETY: all three buffers are valid for the strided extents checked above
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            crs,
            ccs,
        );
    }
}

/// `c = op(a) * op(b) + beta * c`.
pub fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let av = View::of(a, ta);
    let bv = View::of(b, tb);
    assert_eq!((c.rows, c.cols), (av.rows, bv.cols), "gemm output shape mismatch");
    let cols = c.cols as isize;
    gemm_raw(1.0, &a.data, av, &b.data, bv, beta, &mut c.data, cols, 1);
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(a, false, b, false, 0.0, &mut c);
    c
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors with same-shape gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.grads.push(Matrix::zeros(value.rows, value.cols));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.params {
            self.grads[id.0].add_assign(g);
        }
    }

    /// Fails with the offending parameter name if any gradient is NaN/Inf.
    pub fn check_grads_finite(&self) -> Result<()> {
        for (name, g) in self.names.iter().zip(&self.grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, k: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= k);
        }
    }
}

pub type NodeId = usize;

/// Which keys each query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Rows `< content_end` see only columns `< content_end`; later rows see
    /// every column.
    TwoBlock { content_end: usize },
}

impl AttnMask {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match *self {
            AttnMask::Full => true,
            AttnMask::TwoBlock { content_end } => i >= content_end || j < content_end,
        }
    }

    #[inline]
    fn key_limit(&self, i: usize, n: usize) -> usize {
        match *self {
            AttnMask::Full => n,
            AttnMask::TwoBlock { content_end } if i < content_end => content_end.min(n),
            AttnMask::TwoBlock { .. } => n,
        }
    }
}

/// Rotary encoding settings. Without explicit positions row `i` sits at
/// position `i`.
#[derive(Clone, Debug)]
pub struct Rope {
    pub base: f64,
    pub positions: Option<Rc<[f64]>>,
}

#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    pub mask: AttnMask,
    /// `None` disables rotary encoding.
    pub rope: Option<Rope>,
    /// Learned per-head bias indexed by clipped relative distance.
    pub rel_bias: Option<(NodeId, usize)>,
}

#[derive(Debug)]
struct AttnCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    spec: AttnSpec,
    q_rot: Matrix,
    k_rot: Matrix,
    /// heads × n × n attention weights.
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    Attention(Box<AttnCache>),
    /// Scalar loss whose input gradient was computed in the forward pass.
    Loss {
        input: NodeId,
        grad: Matrix,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

const EMPTY: Matrix = Matrix {
    rows: 0,
    cols: 0,
    data: Vec::new(),
};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rotates interleaved pairs of each head slice by `pos * base^(-2i/dh)`,
/// where `pos` is the row index unless `positions` is given.
/// `inverse` applies the transposed rotation (used for gradients).
pub fn apply_rope(m: &mut Matrix, heads: usize, base: f64, positions: Option<&[f64]>, inverse: bool) {
    if let Some(p) = positions {
        assert_eq!(p.len(), m.rows, "one rotary position per row");
    }
    let d = m.cols;
    let dh = d / heads;
    let half = dh / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-(2.0 * i as f64) / dh as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..m.rows {
        let pos = positions.map_or(r as f64, |p| p[r]);
        let row = m.row_mut(r);
        for (i, f) in inv_freq.iter().enumerate() {
            let theta = pos * f;
            let (s, c) = (sign * theta).sin_cos();
            for h in 0..heads {
                let a = h * dh + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}

#[inline]
fn rel_bucket(i: usize, j: usize, max_rel: usize) -> usize {
    let d = j as isize - i as isize;
    (d.clamp(-(max_rel as isize), max_rel as isize) + max_rel as isize) as usize
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match self.nodes[id].op {
            Op::Param(p) => self.params.value(p),
            _ => &self.nodes[id].value,
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "node is not a scalar");
        v.data[0]
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(EMPTY, Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!(b.rows, 1);
        let mut v = self.value(x).clone();
        assert_eq!(v.cols, b.cols);
        for r in 0..v.rows {
            for (a, bb) in v.row_mut(r).iter_mut().zip(&b.data) {
                *a += bb;
            }
        }
        self.push(v, Op::AddRow(x, bias))
    }

    /// `x * w + b` with parameter ids.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let wn = self.param(w);
        let y = self.matmul(x, wn);
        match b {
            Some(b) => {
                let bn = self.param(b);
                self.add_row(y, bn)
            }
            None => y,
        }
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a *= k);
        self.push(v, Op::Scale(x, k))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = gelu(*a));
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> NodeId {
        const EPS: f64 = 1e-5;
        let gain_n = self.param(gain);
        let bias_n = self.param(bias);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = vec![0.0; rows];
        let mut out = Matrix::zeros(rows, cols);
        let g = &self.params.value(gain).data;
        let b = &self.params.value(bias).data;
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain: gain_n,
                bias: bias_n,
                xhat,
                rstd,
            },
        )
    }

    /// Rows of an embedding table.
    pub fn gather(&mut self, table: ParamId, ids: &[u32]) -> NodeId {
        let tn = self.param(table);
        let t = self.params.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            v,
            Op::Gather {
                table: tn,
                ids: ids.iter().map(|&i| i as usize).collect(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let cols = av.cols + bv.cols;
        let mut out = Matrix::zeros(av.rows, cols);
        for r in 0..av.rows {
            out.row_mut(r)[..av.cols].copy_from_slice(av.row(r));
            out.row_mut(r)[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols;
        let data = xv.data[start * cols..(start + len) * cols].to_vec();
        self.push(Matrix::from_vec(len, cols, data), Op::SliceRows { x, start })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for r in 0..v.rows {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q`, `k`, `v` (each `n × d`).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttnSpec) -> NodeId {
        let mut q_rot = self.value(q).clone();
        let mut k_rot = self.value(k).clone();
        let (n, d) = q_rot.shape();
        assert_eq!(d % spec.heads, 0, "d_model not divisible by heads");
        let dh = d / spec.heads;
        if let Some(rope) = &spec.rope {
            apply_rope(&mut q_rot, spec.heads, rope.base, rope.positions.as_deref(), false);
            apply_rope(&mut k_rot, spec.heads, rope.base, rope.positions.as_deref(), false);
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; spec.heads * n * n];
        let mut out = Matrix::zeros(n, d);
        let vv = self.value(v);
        let bias = spec.rel_bias.map(|(id, max_rel)| (self.value(id), max_rel));
        let head_view = |m: &Matrix, t: bool| {
            if t {
                View {
                    rows: dh,
                    cols: m.rows,
                    rs: 1,
                    cs: m.cols as isize,
                }
            } else {
                View {
                    rows: m.rows,
                    cols: dh,
                    rs: m.cols as isize,
                    cs: 1,
                }
            }
        };
        for h in 0..spec.heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm_raw(
                scale,
                &q_rot.data[h * dh..],
                head_view(&q_rot, false),
                &k_rot.data[h * dh..],
                head_view(&k_rot, true),
                0.0,
                p,
                n as isize,
                1,
            );
            for i in 0..n {
                let lim = spec.mask.key_limit(i, n);
                let row = &mut p[i * n..(i + 1) * n];
                if let Some((b, max_rel)) = bias {
                    let brow = b.row(h);
                    for (j, s) in row.iter_mut().enumerate().take(lim) {
                        *s += brow[rel_bucket(i, j, max_rel)];
                    }
                }
                softmax_in_place(&mut row[..lim]);
                row[lim..].iter_mut().for_each(|s| *s = 0.0);
            }
            gemm_raw(
                1.0,
                p,
                View {
                    rows: n,
                    cols: n,
                    rs: n as isize,
                    cs: 1,
                },
                &vv.data[h * dh..],
                head_view(vv, false),
                0.0,
                &mut out.data[h * dh..],
                d as isize,
                1,
            );
        }
        self.push(
            out,
            Op::Attention(Box::new(AttnCache {
                q,
                k,
                v,
                spec,
                q_rot,
                k_rot,
                probs,
            })),
        )
    }

    /// Registers a scalar loss node whose gradient w.r.t. `input` is known.
    pub fn loss(&mut self, input: NodeId, value: f64, grad: Matrix) -> NodeId {
        assert_eq!(self.value(input).shape(), grad.shape());
        self.push(Matrix::scalar(value), Op::Loss { input, grad })
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v: f64 = terms.iter().map(|&(n, w)| w * self.scalar(n)).sum();
        self.push(Matrix::scalar(v), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[root] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf | Op::Param(_) => {
                    grads[id] = Some(gout);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    gemm(&gout, false, bv, true, 0.0, &mut ga);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    gemm(av, true, &gout, false, 0.0, &mut gb);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                    grads[id] = Some(gout);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                    grads[id] = Some(gout);
                }
                Op::AddRow(x, bias) => {
                    let mut gb = Matrix::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for (a, g) in gb.data.iter_mut().zip(gout.row(r)) {
                            *a += g;
                        }
                    }
                    acc(&mut grads, *x, gout.clone());
                    acc(&mut grads, *bias, gb);
                    grads[id] = Some(gout);
                }
                Op::Scale(x, k) => {
                    let mut g = gout.clone();
                    g.data.iter_mut().for_each(|v| *v *= k);
                    acc(&mut grads, *x, g);
                    grads[id] = Some(gout);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut g = gout.clone();
                    for (gv, xi) in g.data.iter_mut().zip(&xv.data) {
                        *gv *= gelu_grad(*xi);
                    }
                    acc(&mut grads, *x, g);
                    grads[id] = Some(gout);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = &self.value(*gain).data;
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let dy = gout.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dxh = dy[c] * gv[c];
                            mean_d += dxh;
                            mean_dx += dxh * xh[c];
                            gg.data[c] += dy[c] * xh[c];
                            gbias.data[c] += dy[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = rstd[r] * (dy[c] * gv[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *bias, gbias);
                    grads[id] = Some(gout);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows, t.cols);
                    for (r, &row) in ids.iter().enumerate() {
                        for (a, g) in gt.row_mut(row).iter_mut().zip(gout.row(r)) {
                            *a += g;
                        }
                    }
                    acc(&mut grads, *table, gt);
                    grads[id] = Some(gout);
                }
                Op::ConcatRows(parts) => {
                    let cols = gout.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let data = gout.data[offset * cols..(offset + rows) * cols].to_vec();
                        acc(&mut grads, p, Matrix::from_vec(rows, cols, data));
                        offset += rows;
                    }
                    grads[id] = Some(gout);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut ga = Matrix::zeros(gout.rows, ac);
                    let mut gb = Matrix::zeros(gout.rows, bc);
                    for r in 0..gout.rows {
                        ga.row_mut(r).copy_from_slice(&gout.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&gout.row(r)[ac..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                    grads[id] = Some(gout);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut g = Matrix::zeros(xv.rows, xv.cols);
                    let cols = xv.cols;
                    g.data[start * cols..start * cols + gout.data.len()].copy_from_slice(&gout.data);
                    acc(&mut grads, *x, g);
                    grads[id] = Some(gout);
                }
                Op::Transpose(x) => {
                    acc(&mut grads, *x, gout.transpose());
                    grads[id] = Some(gout);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[id].value;
                    let mut g = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = gout.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, g);
                    grads[id] = Some(gout);
                }
                Op::Attention(cache) => {
                    let (gq, gk, gv, gbias) = self.attention_backward(cache, &gout);
                    acc(&mut grads, cache.q, gq);
                    acc(&mut grads, cache.k, gk);
                    acc(&mut grads, cache.v, gv);
                    if let (Some((bid, _)), Some(gb)) = (cache.spec.rel_bias, gbias) {
                        acc(&mut grads, bid, gb);
                    }
                    grads[id] = Some(gout);
                }
                Op::Loss { input, grad } => {
                    let s = gout.data[0];
                    let mut g = grad.clone();
                    g.data.iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *input, g);
                    grads[id] = Some(gout);
                }
                Op::WeightedSum(terms) => {
                    let s = gout.data[0];
                    for &(n, w) in terms {
                        acc(&mut grads, n, Matrix::scalar(s * w));
                    }
                    grads[id] = Some(gout);
                }
            }
        }

        let params = self
            .param_nodes
            .iter()
            .filter_map(|(&pid, &nid)| grads[nid].take().map(|g| (pid, g)))
            .collect();
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn attention_backward(
        &self,
        c: &AttnCache,
        gout: &Matrix,
    ) -> (Matrix, Matrix, Matrix, Option<Matrix>) {
        let (n, d) = c.q_rot.shape();
        let heads = c.spec.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let vv = self.value(c.v);
        let mut gq = Matrix::zeros(n, d);
        let mut gk = Matrix::zeros(n, d);
        let mut gv = Matrix::zeros(n, d);
        let mut gbias = c
            .spec
            .rel_bias
            .map(|(id, _)| Matrix::zeros(self.value(id).rows, self.value(id).cols));
        let cols_view = |rows: usize| View {
            rows,
            cols: dh,
            rs: d as isize,
            cs: 1,
        };
        let cols_view_t = |rows: usize| View {
            rows: dh,
            cols: rows,
            rs: 1,
            cs: d as isize,
        };
        let sq = View {
            rows: n,
            cols: n,
            rs: n as isize,
            cs: 1,
        };
        let sq_t = View {
            rows: n,
            cols: n,
            rs: 1,
            cs: n as isize,
        };
        let mut dp = vec![0.0; n * n];
        for h in 0..heads {
            let p = &c.probs[h * n * n..(h + 1) * n * n];
            // dP = dO_h · V_hᵀ
            gemm_raw(
                1.0,
                &gout.data[h * dh..],
                cols_view(n),
                &vv.data[h * dh..],
                cols_view_t(n),
                0.0,
                &mut dp,
                n as isize,
                1,
            );
            // dV_h = Pᵀ · dO_h
            gemm_raw(
                1.0,
                p,
                sq_t,
                &gout.data[h * dh..],
                cols_view(n),
                0.0,
                &mut gv.data[h * dh..],
                d as isize,
                1,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), overwriting dp.
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv, pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot);
                }
                if let (Some(gb), Some((_, max_rel))) = (gbias.as_mut(), c.spec.rel_bias) {
                    let lim = c.spec.mask.key_limit(i, n);
                    let brow = gb.row_mut(h);
                    for (j, dv) in dr.iter().enumerate().take(lim) {
                        brow[rel_bucket(i, j, max_rel)] += dv;
                    }
                }
            }
            // dQ_rot = dS · K_rot · scale ; dK_rot = dSᵀ · Q_rot · scale
            gemm_raw(
                scale,
                &dp,
                sq,
                &c.k_rot.data[h * dh..],
                cols_view(n),
                0.0,
                &mut gq.data[h * dh..],
                d as isize,
                1,
            );
            gemm_raw(
                scale,
                &dp,
                sq_t,
                &c.q_rot.data[h * dh..],
                cols_view(n),
                0.0,
                &mut gk.data[h * dh..],
                d as isize,
                1,
            );
        }
        if let Some(rope) = &c.spec.rope {
            apply_rope(&mut gq, heads, rope.base, rope.positions.as_deref(), true);
            apply_rope(&mut gk, heads, rope.base, rope.positions.as_deref(), true);
        }
        (gq, gk, gv, gbias)
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Gradient of the root w.r.t. an input or parameter node.
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes.get(id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}
