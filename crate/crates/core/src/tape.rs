//! A small reverse-mode automatic differentiation tape over `f64` matrices.
//!
//! Every value is a 2-D array. Vectors are `n×1` or `1×n`, scalars `1×1`.
//! Binary elementwise ops broadcast along any axis of length 1. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for the backward pass.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
    Relu,
    LeakyRelu(f64),
    Sqrt,
    Square,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Attention { qkv: Var, segments: Vec<Segment>, heads: usize, probs: Vec<Mat> },
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Norm2(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows { base: Var, src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = match kind {
            Binary::Add => va + vb,
            Binary::Sub => va - vb,
            Binary::Mul => va * vb,
            Binary::Div => va / vb,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Binary(kind, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let value = match kind {
            Unary::Exp => x.mapv(f64::exp),
            Unary::Log => x.mapv(f64::ln),
            Unary::Sigmoid => x.mapv(sigmoid),
            Unary::Tanh => x.mapv(f64::tanh),
            Unary::Gelu => x.mapv(gelu),
            Unary::Relu => x.mapv(|v| v.max(0.0)),
            Unary::LeakyRelu(slope) => x.mapv(|v| if v > 0.0 { v } else { slope * v }),
            Unary::Sqrt => x.mapv(f64::sqrt),
            Unary::Square => x.mapv(|v| v * v),
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise softmax restricted to `support`; entries outside it are
    /// exactly zero and receive no gradient. Every row needs at least one
    /// supported entry.
    pub fn masked_softmax_rows(&mut self, a: Var, support: &Array2<bool>) -> Var {
        let mut value = self.value(a).clone();
        for (mut row, keep) in value.rows_mut().into_iter().zip(support.rows()) {
            let max =
                row.iter().zip(keep.iter()).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (v, &k) in row.iter_mut().zip(keep.iter()) {
                *v = if k { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut value = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { x: a, rstd }, rg)
    }

    /// Multi-head scaled dot-product self-attention, computed independently
    /// within each row segment. `qkv` packs `[Q | K | V]` along columns.
    pub fn segment_attention(&mut self, qkv: Var, segments: &[Segment], heads: usize) -> Var {
        let x = self.value(qkv);
        let d = x.ncols() / 3;
        assert_eq!(d * 3, x.ncols(), "qkv width must be a multiple of 3");
        assert_eq!(d % heads, 0, "width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let rows = seg.start..seg.start + seg.len;
            for h in 0..heads {
                let q = x.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = x.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = x.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                softmax_rows_inplace(&mut p);
                out.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let rg = self.rg(qkv);
        self.push(out, Op::Attention { qkv, segments: segments.to_vec(), heads, probs }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `n×d -> n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Sum down rows: `n×d -> 1×d`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Frobenius norm with a zero subgradient at the origin.
    pub fn norm2(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(a);
        self.push(Mat::from_elem((1, 1), n), Op::Norm2(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// `base` with row `idx[k]` replaced by row `k` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Var {
        let mut value = self.value(base).clone();
        let sv = self.value(src);
        assert_eq!(sv.nrows(), idx.len(), "scatter_rows: index count mismatch");
        for (k, &r) in idx.iter().enumerate() {
            value.row_mut(r).assign(&sv.row(k));
        }
        let rg = self.rg(base) || self.rg(src);
        self.push(value, Op::ScatterRows { base, src, idx: idx.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v);
        let g = reduce_to(g, shape);
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                match kind {
                    Binary::Add => {
                        self.accumulate(grads, *a, g.clone());
                        self.accumulate(grads, *b, g.clone());
                    }
                    Binary::Sub => {
                        self.accumulate(grads, *a, g.clone());
                        self.accumulate(grads, *b, -g);
                    }
                    Binary::Mul => {
                        if self.rg(*a) {
                            self.accumulate(grads, *a, g * vb);
                        }
                        if self.rg(*b) {
                            self.accumulate(grads, *b, g * va);
                        }
                    }
                    Binary::Div => {
                        if self.rg(*a) {
                            self.accumulate(grads, *a, g / vb);
                        }
                        if self.rg(*b) {
                            let gb = -(g * y) / vb;
                            self.accumulate(grads, *b, gb);
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                match kind {
                    Unary::Exp => d *= y,
                    Unary::Log => d /= x,
                    Unary::Sigmoid => Zip::from(&mut d).and(y).for_each(|d, &s| *d *= s * (1.0 - s)),
                    Unary::Tanh => Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t),
                    Unary::Gelu => Zip::from(&mut d).and(x).for_each(|d, &v| *d *= gelu_grad(v)),
                    Unary::Relu => Zip::from(&mut d).and(x).for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    }),
                    Unary::LeakyRelu(slope) => Zip::from(&mut d).and(x).for_each(|d, &v| {
                        if v <= 0.0 {
                            *d *= slope
                        }
                    }),
                    Unary::Sqrt => Zip::from(&mut d).and(y).for_each(|d, &r| *d *= 0.5 / r),
                    Unary::Square => Zip::from(&mut d).and(x).for_each(|d, &v| *d *= 2.0 * v),
                }
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &v| {
                    if v < *lo || v > *hi {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = g * y;
                for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|v, &p| *v -= p * dot);
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, rstd } => {
                let d = y.ncols() as f64;
                let mut dx = g.clone();
                for ((mut row, yr), r) in dx.rows_mut().into_iter().zip(y.rows()).zip(rstd) {
                    let mean_g = row.sum() / d;
                    let mean_gy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                    Zip::from(&mut row).and(&yr).for_each(|v, &yh| *v = r * (*v - mean_g - yh * mean_gy));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { qkv, segments, heads, probs } => {
                let x = self.value(*qkv);
                let d = x.ncols() / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dx = Mat::zeros(x.dim());
                let mut pi = probs.iter();
                for seg in segments {
                    let rows = seg.start..seg.start + seg.len;
                    for h in 0..*heads {
                        let p = pi.next().expect("attention cache");
                        let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
                        let q = x.slice(s![rows.clone(), qc..qc + dh]);
                        let k = x.slice(s![rows.clone(), kc..kc + dh]);
                        let v = x.slice(s![rows.clone(), vc..vc + dh]);
                        let go = g.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                        let dv = p.t().dot(&go);
                        let mut ds = go.dot(&v.t());
                        for (mut row, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = row.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                            Zip::from(&mut row).and(&pr).for_each(|v, &pp| *v = pp * (*v - dot));
                        }
                        ds *= scale;
                        let dq = ds.dot(&k);
                        let dk = ds.t().dot(&q);
                        dx.slice_mut(s![rows.clone(), qc..qc + dh]).assign(&dq);
                        dx.slice_mut(s![rows.clone(), kc..kc + dh]).assign(&dk);
                        dx.slice_mut(s![rows.clone(), vc..vc + dh]).assign(&dv);
                    }
                }
                self.accumulate(grads, *qkv, dx);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Mat::from_elem(shape, g[[0, 0]]));
            }
            Op::SumRows(a) | Op::SumCols(a) => {
                let shape = self.shape(*a);
                let full = g.broadcast(shape).expect("sum broadcast").to_owned();
                self.accumulate(grads, *a, full);
            }
            Op::Norm2(a) => {
                let n = y[[0, 0]];
                if n > 0.0 {
                    self.accumulate(grads, *a, self.value(*a) * (g[[0, 0]] / n));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (k, &r) in idx.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(k);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterRows { base, src, idx } => {
                if self.rg(*base) {
                    let mut d = g.clone();
                    for &r in idx {
                        d.row_mut(r).fill(0.0);
                    }
                    self.accumulate(grads, *base, d);
                }
                if self.rg(*src) {
                    self.accumulate(grads, *src, g.select(Axis(0), idx));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.shape(*p).1;
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
        }
    }
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if g.nrows() != shape.0 {
        debug_assert_eq!(shape.0, 1);
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if g.ncols() != shape.1 {
        debug_assert_eq!(shape.1, 1);
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around `x0`, compared with the tape gradient.
    fn check<F>(x0: Mat, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        let analytic = tape.backward(y).get_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let v = t.leaf(xp);
                let out = f(&mut t, v);
                t.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-5, "grad mismatch at {idx}: analytic {a} numeric {numeric}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(sample(), |t, x| {
            let a = t.sigmoid(x);
            let b = t.tanh(x);
            let c = t.gelu(x);
            let d = t.mul(a, b);
            let e = t.add(d, c);
            let f = t.square(e);
            t.sum_all(f)
        });
        check(sample().mapv(|v: f64| v.abs() + 0.5), |t, x| {
            let a = t.ln(x);
            let b = t.sqrt(x);
            let c = t.div(a, b);
            let e = t.exp(c);
            t.sum_all(e)
        });
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        check(array![[0.5, -0.2, 0.9]], |t, x| {
            let m = t.constant(sample());
            let y = t.mul(m, x);
            let z = t.sub(y, x);
            let w = t.square(z);
            t.sum_all(w)
        });
        check(array![[0.5], [-0.3]], |t, x| {
            let m = t.constant(sample());
            let y = t.div(m, x);
            let w = t.square(y);
            t.sum_all(w)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(sample(), |t, x| {
            let w = t.constant(array![[0.2, -0.4], [0.1, 0.3], [-0.6, 0.5]]);
            let y = t.matmul(x, w);
            let sm = t.softmax_rows(y);
            let ln = t.layer_norm(x, 1e-5);
            let tr = t.transpose(ln);
            let sr = t.slice_rows(tr, 1, 2);
            let g = t.gather_rows(sr, &[1, 0, 1]);
            let s1 = t.sum_rows(g);
            let s2 = t.sum_cols(sm);
            let s1t = t.transpose(s1);
            let cc = t.concat_rows(&[s1t, x]);
            let c2 = t.concat_cols(&[s2, s2]);
            let n = t.norm2(cc);
            let q = t.square(c2);
            let qs = t.sum_all(q);
            let sc = t.slice_cols(x, 1, 2);
            let base = t.constant(Mat::ones((3, 2)));
            let sct = t.scatter_rows(base, sc, &[2, 0]);
            let sq = t.square(sct);
            let ss = t.sum_all(sq);
            let tot = t.add(n, qs);
            t.add(tot, ss)
        });
    }

    #[test]
    fn masked_softmax_zeroes_unsupported_entries() {
        let support = array![[true, false, true], [false, true, false]];
        let mut tape = Tape::new();
        let x = tape.leaf(sample());
        let y = tape.masked_softmax_rows(x, &support);
        assert_eq!(tape.value(y)[[0, 1]], 0.0);
        assert_eq!(tape.value(y)[[1, 1]], 1.0);
        check(sample(), |t, x| {
            let y = t.masked_softmax_rows(x, &support);
            let w = t.constant(sample());
            let z = t.mul(y, w);
            let z = t.square(z);
            t.sum_all(z)
        });
    }

    #[test]
    fn segment_attention_matches_finite_differences() {
        let x0 = Mat::from_shape_fn((5, 12), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.1 - 0.5);
        let segs = vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
        check(x0, |t, x| {
            let a = t.segment_attention(x, &segs, 2);
            let w = t.constant(Mat::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.3));
            let m = t.mul(a, w);
            let m = t.square(m);
            t.sum_all(m)
        });
    }

    #[test]
    fn segments_do_not_attend_across_boundaries() {
        let x0 = Mat::from_shape_fn((4, 6), |(i, j)| (i + j) as f64 * 0.1);
        let segs = vec![Segment { start: 0, len: 2 }, Segment { start: 2, len: 2 }];
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let a = t.segment_attention(x, &segs, 1);
        let before = t.value(a).clone();
        let mut x1 = x0;
        x1.row_mut(3).fill(9.0);
        let mut t2 = Tape::new();
        let x = t2.constant(x1);
        let a = t2.segment_attention(x, &segs, 1);
        assert_eq!(before.row(0), t2.value(a).row(0));
        assert_eq!(before.row(1), t2.value(a).row(1));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(sample());
        let x = t.leaf(sample());
        let y = t.mul(c, x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn norm2_at_origin_has_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros((1, 3)));
        let n = t.norm2(x);
        assert_eq!(t.scalar(n), 0.0);
        let g = t.backward(n);
        assert!(g.get_or_zeros(x, (1, 3)).iter().all(|v| *v == 0.0));
    }
}
