//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! (transitively) depends on a trainable leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MaxRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    GroupNorm { x: Var, groups: usize, inv_std: Vec<f64> },
    NormalizeRows { x: Var, eps: f64, norms: Vec<f64> },
    RowDot(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    PixelShuffle2 { x: Var, height: usize, width: usize },
}

/// Geometry of a square, stride-1, zero-padded ("same") convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    /// `x (r x c) + b (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(b), (1, c), "add_row bias shape");
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for i in 0..r {
            for (o, bb) in v.row_mut(i).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(v, Op::AddRow(x, b), rg)
    }

    /// `x (r x c) * g (1 x c)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(g), (1, c), "mul_row gate shape");
        let gate = self.value(g).data().to_vec();
        let mut v = self.value(x).clone();
        for i in 0..r {
            for (o, gg) in v.row_mut(i).iter_mut().zip(&gate) {
                *o *= gg;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        self.push(v, Op::MulRow(x, g), rg)
    }

    /// `x (r x c) * s (r x 1)` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (r, _) = self.shape(x);
        assert_eq!(self.shape(s), (r, 1), "mul_col scale shape");
        let scale = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, sc) in scale.iter().enumerate() {
            for o in v.row_mut(i) {
                *o *= sc;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Op::MulCol(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a + s);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(v, Op::Transpose(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * normal_cdf(a));
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::log);
        let rg = self.rg(x);
        self.push(v, Op::Ln(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut v = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, a) in v.data_mut().iter_mut().zip(t.row(i)) {
                *o += a;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SumRows(x), rg)
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let r = self.shape(x).0 as f64;
        let s = self.sum_rows(x);
        self.scale(s, 1.0 / r)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let r = t.rows();
        let v = Tensor::from_vec(r, 1, (0..r).map(|i| t.row(i).iter().sum()).collect());
        let rg = self.rg(x);
        self.push(v, Op::SumCols(x), rg)
    }

    /// Column maxima: `r x c -> 1 x c`. Ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        assert!(r > 0, "max_rows over zero rows");
        let mut arg = vec![0usize; c];
        let mut v = Tensor::from_vec(1, c, t.row(0).to_vec());
        for i in 1..r {
            for (j, &a) in t.row(i).iter().enumerate() {
                if a > v.data()[j] {
                    v.data_mut()[j] = a;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::MaxRows(x, arg), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), r, "concat_cols row mismatch");
            let c = t.cols();
            for i in 0..r {
                v.row_mut(i)[off..off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            r += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(r, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let t = self.value(x);
        let r = t.rows();
        let mut v = Tensor::zeros(r, cols.len());
        for i in 0..r {
            let src = t.row(i);
            for (o, &j) in v.row_mut(i).iter_mut().zip(cols) {
                *o = src[j];
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SelectCols(x, cols.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let cols: Vec<usize> = (start..start + len).collect();
        self.select_cols(x, &cols)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(rows.len(), c, data),
            Op::SelectRows(x, rows.to_vec()),
            rg,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &a) in v.row_mut(i).iter_mut().zip(row) {
                *o = libm::exp(a - m);
                z += *o;
            }
            for o in v.row_mut(i) {
                *o /= z;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    /// `log(sum_j exp(x_ij))` per row: `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let r = t.rows();
        let v = Tensor::from_vec(r, 1, (0..r).map(|i| logsumexp(t.row(i))).collect());
        let rg = self.rg(x);
        self.push(v, Op::LogSumExpRows(x), rg)
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut v = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            for (o, &a) in v.row_mut(i).iter_mut().zip(row) {
                *o = (a - mean) * is;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::LayerNormRows { x, inv_std }, rg)
    }

    /// Group normalisation of an `(H*W) x C` grid: channels are split into
    /// `groups` contiguous blocks, each standardised over all locations and
    /// its channels. No affine terms.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        assert!(groups > 0 && c % groups == 0, "group count must divide channels");
        let gs = c / groups;
        let n = (r * gs) as f64;
        let mut v = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let cs = g * gs..(g + 1) * gs;
            let mut mean = 0.0;
            for i in 0..r {
                mean += t.row(i)[cs.clone()].iter().sum::<f64>();
            }
            mean /= n;
            let mut var = 0.0;
            for i in 0..r {
                var += t.row(i)[cs.clone()]
                    .iter()
                    .map(|a| (a - mean) * (a - mean))
                    .sum::<f64>();
            }
            var /= n;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            for i in 0..r {
                for j in cs.clone() {
                    v.set(i, j, (t.get(i, j) - mean) * is);
                }
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::GroupNorm { x, groups, inv_std }, rg)
    }

    /// `x / max(|x|, eps)` per row.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut v = Tensor::zeros(r, c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let n = libm::sqrt(row.iter().map(|a| a * a).sum::<f64>());
            norms.push(n);
            let d = n.max(eps);
            for (o, &a) in v.row_mut(i).iter_mut().zip(row) {
                *o = a / d;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::NormalizeRows { x, eps, norms }, rg)
    }

    /// Row-wise inner products: `r x c, r x c -> r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.shape(), tb.shape(), "row_dot shape mismatch");
        let r = ta.rows();
        let v = Tensor::from_vec(
            r,
            1,
            (0..r)
                .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
                .collect(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::RowDot(a, b), rg)
    }

    /// Stride-1 "same" convolution over an `(H*W) x Cin` grid. The kernel is
    /// stored as `(k*k*Cin) x Cout`, block `(dy*k + dx)` holding the taps for
    /// offset `(dy - k/2, dx - k/2)`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        assert_eq!(
            xt.shape(),
            (geom.height * geom.width, geom.in_channels),
            "conv2d input shape"
        );
        assert_eq!(
            wt.shape(),
            (geom.kernel * geom.kernel * geom.in_channels, geom.out_channels),
            "conv2d kernel shape"
        );
        let v = conv_forward(xt, wt, geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv2d { x, w, geom }, rg)
    }

    /// Rearranges an `(H*W) x (4*C)` grid into `(2H*2W) x C`; column block
    /// `a*2 + b` of input location `(y, x)` lands at `(2y + a, 2x + b)`.
    pub fn pixel_shuffle2(&mut self, x: Var, height: usize, width: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), height * width, "pixel_shuffle2 rows");
        assert_eq!(t.cols() % 4, 0, "pixel_shuffle2 columns");
        let c = t.cols() / 4;
        let ow = 2 * width;
        let mut v = Tensor::zeros(4 * height * width, c);
        for y in 0..height {
            for xx in 0..width {
                let src = t.row(y * width + xx);
                for a in 0..2 {
                    for b in 0..2 {
                        let dst = (2 * y + a) * ow + 2 * xx + b;
                        let blk = (a * 2 + b) * c;
                        v.row_mut(dst).copy_from_slice(&src[blk..blk + c]);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::PixelShuffle2 { x, height, width }, rg)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(va, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(vb, |x, y| x / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.zip_map(out, |x, y| -x * y);
                    self.acc(grads, *b, t.zip_map(vb, |x, y| x / y));
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, column_sums(g));
                }
            }
            Op::MulRow(x, gate) => {
                let vx = self.value(*x);
                let vg = self.value(*gate);
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for i in 0..gx.rows() {
                        for (o, s) in gx.row_mut(i).iter_mut().zip(vg.data()) {
                            *o *= s;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.rg(*gate) {
                    self.acc(grads, *gate, column_sums(&g.zip_map(vx, |a, b| a * b)));
                }
            }
            Op::MulCol(x, s) => {
                let vx = self.value(*x);
                let vs = self.value(*s);
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for (i, sc) in vs.data().iter().enumerate() {
                        for o in gx.row_mut(i) {
                            *o *= sc;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.rg(*s) {
                    let r = vx.rows();
                    let gs = (0..r)
                        .map(|i| g.row(i).iter().zip(vx.row(i)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::from_vec(r, 1, gs));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.scale(*s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T ; da = g b ; db = g^T a
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose()),
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, g.zip_map(vx, |d, a| if a > 0.0 { d } else { 0.0 }));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, g.zip_map(vx, |d, a| d * (normal_cdf(a) + a * normal_pdf(a))));
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, g.zip_map(out, |d, s| d * s * (1.0 - s)));
            }
            Op::Exp(x) => self.acc(grads, *x, g.zip_map(out, |d, e| d * e)),
            Op::Ln(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, g.zip_map(vx, |d, a| d / a));
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                self.acc(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(x) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i).copy_from_slice(g.data());
                }
                self.acc(grads, *x, gx);
            }
            Op::SumCols(x) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    for o in gx.row_mut(i) {
                        *o = gi;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::MaxRows(x, arg) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (j, &i) in arg.iter().enumerate() {
                    gx.set(i, j, g.data()[j]);
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.acc(grads, p, gp);
                    }
                    off += r;
                }
            }
            Op::SelectCols(x, cols) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.row(i);
                    let row = gx.row_mut(i);
                    for (k, &j) in cols.iter().enumerate() {
                        row[j] += gi[k];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SelectRows(x, rows) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (k, &i) in rows.iter().enumerate() {
                    for (o, a) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += a;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = out.shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in gx.row_mut(i).iter_mut().zip(y).zip(gi) {
                        *o = yy * (gg - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LogSumExpRows(x) => {
                let vx = self.value(*x);
                let (r, c) = vx.shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let lse = out.data()[i];
                    let gi = g.data()[i];
                    for (o, &a) in gx.row_mut(i).iter_mut().zip(vx.row(i)) {
                        *o = gi * libm::exp(a - lse);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (r, c) = out.shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    norm_backward(out.row(i), g.row(i), inv_std[i], gx.row_mut(i));
                }
                self.acc(grads, *x, gx);
            }
            Op::GroupNorm { x, groups, inv_std } => {
                let (r, c) = out.shape();
                let gs = c / groups;
                let n = (r * gs) as f64;
                let mut gx = Tensor::zeros(r, c);
                for (gi, &is) in inv_std.iter().enumerate() {
                    let cs = gi * gs..(gi + 1) * gs;
                    let mut mean_g = 0.0;
                    let mut mean_gy = 0.0;
                    for i in 0..r {
                        for j in cs.clone() {
                            mean_g += g.get(i, j);
                            mean_gy += g.get(i, j) * out.get(i, j);
                        }
                    }
                    mean_g /= n;
                    mean_gy /= n;
                    for i in 0..r {
                        for j in cs.clone() {
                            gx.set(i, j, is * (g.get(i, j) - mean_g - out.get(i, j) * mean_gy));
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::NormalizeRows { x, eps, norms } => {
                let (r, c) = out.shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let n = norms[i];
                    let gi = g.row(i);
                    let yi = out.row(i);
                    if n > *eps {
                        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for ((o, &gg), &yy) in gx.row_mut(i).iter_mut().zip(gi).zip(yi) {
                            *o = (gg - yy * dot) / n;
                        }
                    } else {
                        for (o, &gg) in gx.row_mut(i).iter_mut().zip(gi) {
                            *o = gg / eps;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = vb.clone();
                    for i in 0..ga.rows() {
                        let s = g.data()[i];
                        for o in ga.row_mut(i) {
                            *o *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = va.clone();
                    for i in 0..gb.rows() {
                        let s = g.data()[i];
                        for o in gb.row_mut(i) {
                            *o *= s;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = conv_backward(self.value(*x), self.value(*w), g, *geom);
                if self.rg(*x) {
                    self.acc(grads, *x, gx);
                }
                if self.rg(*w) {
                    self.acc(grads, *w, gw);
                }
            }
            Op::PixelShuffle2 { x, height, width } => {
                let (r, c4) = self.shape(*x);
                let c = c4 / 4;
                let ow = 2 * width;
                let mut gx = Tensor::zeros(r, c4);
                for y in 0..*height {
                    for xx in 0..*width {
                        let dst = gx.row_mut(y * width + xx);
                        for a in 0..2 {
                            for b in 0..2 {
                                let src = g.row((2 * y + a) * ow + 2 * xx + b);
                                let blk = (a * 2 + b) * c;
                                dst[blk..blk + c].copy_from_slice(src);
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let (r, c) = g.shape();
    let mut out = Tensor::zeros(1, c);
    for i in 0..r {
        for (o, a) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += a;
        }
    }
    out
}

fn norm_backward(y: &[f64], g: &[f64], inv_std: f64, out: &mut [f64]) {
    let n = y.len() as f64;
    let mean_g = g.iter().sum::<f64>() / n;
    let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for ((o, &gg), &yy) in out.iter_mut().zip(g).zip(y) {
        *o = inv_std * (gg - mean_g - yy * mean_gy);
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(xs.iter().map(|&a| libm::exp(a - m)).sum::<f64>())
}

/// Visits every valid (output row, input row, kernel block) triple.
fn for_each_tap(geom: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ConvGeom {
        height,
        width,
        kernel,
        ..
    } = geom;
    let pad = (kernel / 2) as isize;
    for dy in 0..kernel {
        for dx in 0..kernel {
            let block = dy * kernel + dx;
            let oy = dy as isize - pad;
            let ox = dx as isize - pad;
            for y in 0..height {
                let sy = y as isize + oy;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for x in 0..width {
                    let sx = x as isize + ox;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    f(y * width + x, sy as usize * width + sx as usize, block);
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
    let (cin, cout) = (geom.in_channels, geom.out_channels);
    let mut out = Tensor::zeros(geom.height * geom.width, cout);
    let wd = w.data();
    for_each_tap(geom, |o, i, block| {
        let xr = x.row(i);
        let orow = out.row_mut(o);
        for (ci, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &wd[(block * cin + ci) * cout..(block * cin + ci + 1) * cout];
            for (oo, &ww) in orow.iter_mut().zip(wr) {
                *oo += a * ww;
            }
        }
    });
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, geom: ConvGeom) -> (Tensor, Tensor) {
    let (cin, cout) = (geom.in_channels, geom.out_channels);
    let mut gx = Tensor::zeros(x.rows(), cin);
    let mut gw = Tensor::zeros(w.rows(), cout);
    let wd = w.data();
    for_each_tap(geom, |o, i, block| {
        let gr = g.row(o);
        let xr = x.row(i);
        {
            let gxr = gx.row_mut(i);
            for ci in 0..cin {
                let wr = &wd[(block * cin + ci) * cout..(block * cin + ci + 1) * cout];
                gxr[ci] += wr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let gwd = gw.data_mut();
        for (ci, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &mut gwd[(block * cin + ci) * cout..(block * cin + ci + 1) * cout];
            for (o2, &gg) in row.iter_mut().zip(gr) {
                *o2 += a * gg;
            }
        }
    });
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_gradient, random_tensor};

    fn geom(h: usize, w: usize, k: usize, cin: usize, cout: usize) -> ConvGeom {
        ConvGeom {
            height: h,
            width: w,
            kernel: k,
            in_channels: cin,
            out_channels: cout,
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = geom(4, 5, 3, 2, 3);
        let x = random_tensor(20, 2, 1);
        let w = random_tensor(18, 3, 2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, g);
        for yy in 0..4isize {
            for xx in 0..5isize {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sy, sx) = (yy + dy, xx + dx);
                            if !(0..4).contains(&sy) || !(0..5).contains(&sx) {
                                continue;
                            }
                            let blk = ((dy + 1) * 3 + dx + 1) as usize;
                            for c in 0..2 {
                                acc += x.get((sy * 5 + sx) as usize, c) * w.get(blk * 2 + c, o);
                            }
                        }
                    }
                    let got = tape.value(y).get((yy * 5 + xx) as usize, o);
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_gradients() {
        let a = random_tensor(3, 4, 11);
        let b = random_tensor(3, 4, 12).map(|v| v.abs() + 0.5);
        check_gradient(&[a.clone(), b.clone()], |t, v| {
            let m = t.mul(v[0], v[1]);
            let d = t.div(m, v[1]);
            let s = t.sigmoid(d);
            let e = t.exp(v[0]);
            let l = t.ln(v[1]);
            let q = t.sub(e, l);
            let r = t.add(s, q);
            let r = t.relu(r);
            let r = t.gelu(r);
            let r = t.add_scalar(r, 0.3);
            let r = t.scale(r, 1.7);
            let sq = t.mul(r, r);
            t.sum_all(sq)
        });
    }

    #[test]
    fn gelu_reference_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(1, 3, alloc::vec![-1.0, 0.0, 2.0]));
        let y = t.gelu(x);
        // x * Phi(x) with tabulated Phi(-1) and Phi(2)
        let want = [-0.158_655_253_931_457_05, 0.0, 2.0 * 0.977_249_868_051_820_8];
        for (a, b) in t.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        check_gradient(&[random_tensor(4, 3, 31).scale(2.0)], |t, v| {
            let g = t.gelu(v[0]);
            t.sum_all(g)
        });
    }

    #[test]
    fn broadcast_and_reduction_gradients() {
        let x = random_tensor(5, 3, 21);
        let b = random_tensor(1, 3, 22);
        let s = random_tensor(5, 1, 23);
        check_gradient(&[x, b, s], |t, v| {
            let y = t.add_row(v[0], v[1]);
            let y = t.mul_row(y, v[1]);
            let y = t.mul_col(y, v[2]);
            let m = t.max_rows(y);
            let mr = t.mean_rows(y);
            let c = t.concat_cols(&[m, mr]);
            let rs = t.sum_cols(y);
            let sel = t.select_rows(y, &[4, 0, 4]);
            let sc = t.select_cols(sel, &[2, 0]);
            let tr = t.transpose(sc);
            let a = t.sum_all(c);
            let b2 = t.mul(rs, rs);
            let b2 = t.sum_all(b2);
            let c2 = t.mul(tr, tr);
            let c2 = t.sum_all(c2);
            let ab = t.add(a, b2);
            t.add(ab, c2)
        });
    }

    #[test]
    fn matmul_and_attention_gradients() {
        let q = random_tensor(3, 4, 31);
        let k = random_tensor(5, 4, 32);
        let v = random_tensor(5, 2, 33);
        check_gradient(&[q, k, v], |t, vs| {
            let s = t.matmul_t(vs[0], vs[1]);
            let p = t.softmax_rows(s);
            let o = t.matmul(p, vs[2]);
            let l = t.logsumexp_rows(o);
            let rows = t.concat_rows(&[o, o]);
            let sq = t.mul(rows, rows);
            let a = t.sum_all(sq);
            let b = t.sum_all(l);
            t.add(a, b)
        });
    }

    #[test]
    fn normalisation_gradients() {
        let x = random_tensor(6, 4, 41);
        let w = random_tensor(6, 4, 42);
        check_gradient(&[x, w], |t, v| {
            let ln = t.layer_norm_rows(v[0], 1e-5);
            let gn = t.group_norm(v[0], 2, 1e-5);
            let nr = t.normalize_rows(v[0], 1e-8);
            let a = t.mul(ln, v[1]);
            let b = t.mul(gn, v[1]);
            let c = t.row_dot(nr, v[1]);
            let a = t.sum_all(a);
            let b = t.sum_all(b);
            let c = t.sum_all(c);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
    }

    #[test]
    fn conv_and_shuffle_gradients() {
        let g = geom(3, 4, 3, 2, 4);
        let x = random_tensor(12, 2, 51);
        let w = random_tensor(18, 4, 52);
        let probe = random_tensor(48, 1, 53);
        check_gradient(&[x, w, probe], |t, v| {
            let y = t.conv2d(v[0], v[1], g);
            let up = t.pixel_shuffle2(y, 3, 4);
            let sq = t.mul(up, up);
            let p = t.mul(up, v[2]);
            let a = t.sum_all(sq);
            let b = t.sum_all(p);
            t.add(a, b)
        });
    }

    #[test]
    fn pixel_shuffle_layout() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let y = t.pixel_shuffle2(x, 1, 1);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.shape(y), (4, 1));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let p = t.param(Tensor::scalar(3.0));
        let y = t.mul(c, p);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }
}
