//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value, so node order is
//! already a topological order and the reverse pass is a single backwards sweep.

use std::ops::Range;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_row, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Conv1d { x: Var, w: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    Rope { x: Var, head_dim: usize, cos: Vec<f64>, sin: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Opaque { name: String, inputs: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    /// Adds a length-`c` bias to every row of an `r×c` value.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (r, c) = xv.dims2();
        if bv.len() != c {
            return Err(Error::shape(format!(
                "bias of length {} for {} columns",
                bv.len(),
                c
            )));
        }
        let mut out = xv.clone();
        for i in 0..r {
            for (o, &bb) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_lastdim()?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Layer normalization over the last dimension, without affine terms.
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        self.push(out, Op::LayerNorm { x, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    /// Stride-1 "same" convolution along rows. `x` is `L×c_in`, `w` is `[k, c_in, c_out]`, `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (len, cin) = xv.dims2();
        let ws = wv.shape();
        if ws.len() != 3 || ws[1] != cin || ws[0] % 2 == 0 {
            return Err(Error::shape(format!(
                "conv1d kernel {ws:?} for input {:?}",
                xv.shape()
            )));
        }
        let (k, cout) = (ws[0], ws[2]);
        let mut out = vec![0.0; len * cout];
        for tap in 0..k {
            if let Some((dst, src)) = conv_span(len, k, tap) {
                let n = dst.len();
                gemm_nn(
                    &xv.data()[src.start * cin..src.end * cin],
                    &wv.data()[tap * cin * cout..(tap + 1) * cin * cout],
                    &mut out[dst.start * cout..dst.end * cout],
                    n,
                    cin,
                    cout,
                );
            }
        }
        let out = Tensor::new(&[len, cout], out)?;
        Ok(self.push(out, Op::Conv1d { x, w }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Range(format!("row {bad} of {r}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if range.end > r || range.start > range.end {
            return Err(Error::Range(format!("rows {range:?} of {r}")));
        }
        let out = Tensor::new(
            &[range.len(), c],
            xv.data()[range.start * c..range.end * c].to_vec(),
        )?;
        Ok(self.push(out, Op::SliceRows(x, range)))
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if range.end > c || range.start > range.end {
            return Err(Error::Range(format!("cols {range:?} of {c}")));
        }
        let mut data = Vec::with_capacity(r * range.len());
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[range.clone()]);
        }
        let out = Tensor::new(&[r, range.len()], data)?;
        Ok(self.push(out, Op::SliceCols(x, range)))
    }

    /// Rotary embedding on an `L×(heads·head_dim)` value; row `l` sits at `positions[l]`.
    pub fn rope(&mut self, x: Var, positions: &[f64], head_dim: usize, base: f64) -> Result<Var> {
        let xv = self.value(x);
        let (len, width) = xv.dims2();
        if head_dim % 2 != 0 || head_dim == 0 || width % head_dim != 0 {
            return Err(Error::shape(format!(
                "rope head_dim {head_dim} for width {width}"
            )));
        }
        if positions.len() != len {
            return Err(Error::shape("rope positions length"));
        }
        let (cos, sin) = rope_tables(positions, head_dim, base);
        let mut out = xv.clone();
        rotate_rows(out.data_mut(), width, head_dim, &cos, &sin, false);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            },
        ))
    }

    /// Multi-head softmax attention scaled by `1/sqrt(head_dim)`. `q` is
    /// `Lq×(heads·head_dim)`; `k` and `v` are `Lk×(heads·head_dim)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, w) = qv.dims2();
        let (lk, wk) = kv.dims2();
        if heads == 0 || w % heads != 0 || wk != w || vv.dims2() != (lk, w) {
            return Err(Error::shape(format!(
                "attention q {:?}, k {:?}, v {:?} with {heads} heads",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let hd = w / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; lq * w];
        let mut probs = vec![0.0; heads * lq * lk];
        for h in 0..heads {
            let qh = head_cols(qv.data(), w, h, hd);
            let kh = head_cols(kv.data(), w, h, hd);
            let vh = head_cols(vv.data(), w, h, hd);
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            gemm_nt(&qh, &kh, p, lq, hd, lk);
            for row in p.chunks_mut(lk) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_row(row);
            }
            let mut oh = vec![0.0; lq * hd];
            gemm_nn(p, &vh, &mut oh, lq, lk, hd);
            scatter_head_cols(&mut out, &oh, w, h, hd);
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite attention output".into()));
        }
        let out = Tensor::new(&[lq, w], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Column-wise mean, giving a `1×c` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        self.push(Tensor::new(&[1, c], out).unwrap(), Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Records a value computed outside the differentiable primitive set.
    /// Gradients cannot flow through it.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor) -> Var {
        self.push(
            value,
            Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                accumulate_raw(grads, *a, av.shape(), da);
                accumulate_raw(grads, *b, bv.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                accumulate_raw(grads, *b, g.shape(), g.data().iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = g.mul(self.value(*b))?;
                let db = g.mul(self.value(*a))?;
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, s) => {
                accumulate_raw(grads, *a, g.shape(), g.data().iter().map(|x| x * s).collect());
            }
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g);
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate_raw(grads, *b, self.value(*b).shape(), db);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in dx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((d, &yy), &gg) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yy * (gg - dot);
                    }
                }
                accumulate_raw(grads, *x, y.shape(), dx);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (i, ((drow, yrow), grow)) in dx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .enumerate()
                {
                    let mean_g = grow.iter().sum::<f64>() / c as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((d, &yy), &gg) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = rstd[i] * (gg - mean_g - yy * mean_gy);
                    }
                }
                accumulate_raw(grads, *x, y.shape(), dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(g.data()).map(|(&v, &gg)| gg * gelu(v).1).collect();
                accumulate_raw(grads, *x, xv.shape(), dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| {
                        let s = sigmoid(v);
                        gg * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate_raw(grads, *x, xv.shape(), dx);
            }
            Op::Conv1d { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (len, cin) = xv.dims2();
                let (k, cout) = (wv.shape()[0], wv.shape()[2]);
                let mut dx = vec![0.0; len * cin];
                let mut dw = vec![0.0; k * cin * cout];
                for tap in 0..k {
                    if let Some((dst, src)) = conv_span(len, k, tap) {
                        let n = dst.len();
                        let wk = &wv.data()[tap * cin * cout..(tap + 1) * cin * cout];
                        let gk = &g.data()[dst.start * cout..dst.end * cout];
                        gemm_nt(gk, wk, &mut dx[src.start * cin..src.end * cin], n, cout, cin);
                        gemm_tn(
                            &xv.data()[src.start * cin..src.end * cin],
                            gk,
                            &mut dw[tap * cin * cout..(tap + 1) * cin * cout],
                            cin,
                            n,
                            cout,
                        );
                    }
                }
                accumulate_raw(grads, *x, xv.shape(), dx);
                accumulate_raw(grads, *w, wv.shape(), dw);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (j, &i) in idx.iter().enumerate() {
                    for (d, v) in dx[i * c..(i + 1) * c].iter_mut().zip(&g.data()[j * c..(j + 1) * c]) {
                        *d += v;
                    }
                }
                accumulate_raw(grads, *x, xv.shape(), dx);
            }
            Op::Reshape(x) => {
                accumulate_raw(grads, *x, self.value(*x).shape(), g.data().to_vec());
            }
            Op::Transpose(x) => {
                let gt = g.transpose()?;
                accumulate_raw(grads, *x, self.value(*x).shape(), gt.into_data());
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate_raw(grads, p, self.value(p).shape(), g.data()[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                    }
                    accumulate_raw(grads, p, self.value(p).shape(), d);
                    off += c;
                }
            }
            Op::SliceRows(x, range) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[range.start * c..range.end * c].copy_from_slice(g.data());
                accumulate_raw(grads, *x, xv.shape(), dx);
            }
            Op::SliceCols(x, range) => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2();
                let w = range.len();
                let mut dx = vec![0.0; xv.len()];
                for i in 0..r {
                    dx[i * c + range.start..i * c + range.end]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                accumulate_raw(grads, *x, xv.shape(), dx);
            }
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            } => {
                let mut dx = g.data().to_vec();
                rotate_rows(&mut dx, g.cols(), *head_dim, cos, sin, true);
                accumulate_raw(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (lq, w) = qv.dims2();
                let lk = kv.rows();
                let hd = w / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                for h in 0..*heads {
                    let qh = head_cols(qv.data(), w, h, hd);
                    let kh = head_cols(kv.data(), w, h, hd);
                    let vh = head_cols(vv.data(), w, h, hd);
                    let gh = head_cols(g.data(), w, h, hd);
                    let p = &probs[h * lq * lk..(h + 1) * lq * lk];

                    let mut dvh = vec![0.0; lk * hd];
                    gemm_tn(p, &gh, &mut dvh, lk, lq, hd);
                    let mut ds = vec![0.0; lq * lk];
                    gemm_nt(&gh, &vh, &mut ds, lq, hd, lk);
                    for (drow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (d, &pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dot) * scale;
                        }
                    }
                    let mut dqh = vec![0.0; lq * hd];
                    gemm_nn(&ds, &kh, &mut dqh, lq, lk, hd);
                    let mut dkh = vec![0.0; lk * hd];
                    gemm_tn(&ds, &qh, &mut dkh, lk, lq, hd);

                    scatter_head_cols(&mut dq, &dqh, w, h, hd);
                    scatter_head_cols(&mut dk, &dkh, w, h, hd);
                    scatter_head_cols(&mut dv, &dvh, w, h, hd);
                }
                accumulate_raw(grads, *q, qv.shape(), dq);
                accumulate_raw(grads, *k, kv.shape(), dk);
                accumulate_raw(grads, *v, vv.shape(), dv);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2();
                let mut dx = Vec::with_capacity(xv.len());
                for _ in 0..r {
                    dx.extend(g.data().iter().map(|v| v / r as f64));
                }
                debug_assert_eq!(dx.len(), r * c);
                accumulate_raw(grads, *x, xv.shape(), dx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate_raw(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = xv.len() as f64;
                accumulate_raw(grads, *x, xv.shape(), vec![g.item() / n; xv.len()]);
            }
            Op::Opaque { name, inputs } => {
                if !inputs.is_empty() {
                    return Err(Error::Unsupported(format!(
                        "no reverse rule for primitive `{name}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_raw(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, g).expect("gradient shape")),
    }
}

/// Contiguous copy of head `h`'s columns from a row-major `L×width` buffer.
fn head_cols(data: &[f64], width: usize, h: usize, hd: usize) -> Vec<f64> {
    data.chunks(width)
        .flat_map(|row| row[h * hd..(h + 1) * hd].iter().copied())
        .collect()
}

fn scatter_head_cols(out: &mut [f64], part: &[f64], width: usize, h: usize, hd: usize) {
    for (row, src) in out.chunks_mut(width).zip(part.chunks(hd)) {
        row[h * hd..(h + 1) * hd].copy_from_slice(src);
    }
}

/// Output and input row spans touched by kernel tap `tap` of a same-padded conv.
fn conv_span(len: usize, k: usize, tap: usize) -> Option<(Range<usize>, Range<usize>)> {
    let pad = (k - 1) / 2;
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(len);
    if lo >= hi {
        return None;
    }
    let src_lo = lo + tap - pad;
    Some((lo..hi, src_lo..src_lo + (hi - lo)))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GELU (tanh approximation) and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub(crate) fn rope_tables(positions: &[f64], head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let theta = p * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    (cos, sin)
}

/// Rotates each `(2i, 2i+1)` pair of every head in place. `inverse` applies the transpose.
pub(crate) fn rotate_rows(
    data: &mut [f64],
    width: usize,
    head_dim: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
) {
    let half = head_dim / 2;
    for (l, row) in data.chunks_mut(width).enumerate() {
        let c = &cos[l * half..(l + 1) * half];
        let s = &sin[l * half..(l + 1) * half];
        for head in row.chunks_mut(head_dim) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = a * c[i] - b * sn;
                head[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}
