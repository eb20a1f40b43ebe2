//! Tape-based reverse-mode differentiation over a closed operator set.
//!
//! Every operator pushes a node holding its forward value; `backward` replays
//! the tape in reverse. There is no implicit broadcasting: row/column
//! broadcasts are separate operators so shape bugs surface as errors.

use std::collections::BTreeMap;

use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var, f64),
    LayerNormRows(Var, f64),
    Mse(Var, Var),
    Sum(Var),
    ConcatCols(Var, Var),
    Gather(Var, Vec<usize>),
    DepthwiseConv3x3(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A single-threaded recording of one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "{op} expects a matrix, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn vector_len(t: &Tensor) -> usize {
    t.numel()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Named trainable leaf. Registering the same name twice returns the
    /// existing node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(Op::Leaf, t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// `out[i,j] = a[i,j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "add_row", |x, r| x + r)?;
        Ok(self.push(Op::AddRow(a, row), value))
    }

    /// `out[i,j] = a[i,j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "mul_row", |x, r| x * r)?;
        Ok(self.push(Op::MulRow(a, row), value))
    }

    fn row_broadcast(
        &self,
        a: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, rt) = (self.value(a), self.value(row));
        let (_, k) = as_matrix(at, op)?;
        if vector_len(rt) != k {
            return Err(Error::dim(op, at.shape(), rt.shape()));
        }
        let r = rt.data();
        let data = at
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| f(x, r[idx % k]))
            .collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    /// `out[i,j] = a[i,j] * col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (at, ct) = (self.value(a), self.value(col));
        let (n, k) = as_matrix(at, "mul_col")?;
        if vector_len(ct) != n {
            return Err(Error::dim("mul_col", at.shape(), ct.shape()));
        }
        let c = ct.data();
        let data = at
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * c[idx / k])
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(Op::MulCol(a, col), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    fn require_scalar(&self, s: Var, op: &'static str) -> Result<f64> {
        let t = self.value(s);
        if !t.is_scalar() {
            return Err(Error::dim(op, &[1], t.shape()));
        }
        Ok(t.item())
    }

    /// Multiply every entry by a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.require_scalar(s, "mul_scalar")?;
        Ok(self.unary(a, Op::MulScalar(a, s), |x| x * c))
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.require_scalar(s, "div_scalar")?;
        if c == 0.0 {
            return Err(Error::Domain("division by zero scalar".into()));
        }
        Ok(self.unary(a, Op::DivScalar(a, s), |x| x / c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let value = super::tensor::softmax_rows(self.value(a), temperature)?;
        Ok(self.push(Op::SoftmaxRows(a, temperature), value))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let at = self.value(a);
        let (_, k) = as_matrix(at, "layer_norm_rows")?;
        let mut data = at.data().to_vec();
        for row in data.chunks_mut(k) {
            let (mean, rstd) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(Op::LayerNormRows(a, eps), value))
    }

    /// Mean squared error, a one-element node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::dim("mse", at.shape(), bt.shape()));
        }
        let n = at.numel() as f64;
        let s: f64 = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(s / n)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (n, ka) = as_matrix(at, "concat_cols")?;
        let (n2, kb) = as_matrix(bt, "concat_cols")?;
        if n != n2 {
            return Err(Error::dim("concat_cols", at.shape(), bt.shape()));
        }
        let mut data = Vec::with_capacity(n * (ka + kb));
        for i in 0..n {
            data.extend_from_slice(at.row(i));
            data.extend_from_slice(bt.row(i));
        }
        let value = Tensor::new(vec![n, ka + kb], data)?;
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`. Covers reshape,
    /// patchify and de-patchify.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let at = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= at.numel()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {:?}",
                at.shape()
            )));
        }
        let data = index.iter().map(|&i| at.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::Gather(a, index), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        self.gather(a, (0..n).collect(), shape)
    }

    /// Depthwise 3×3 convolution of an `[H×W×C]` image with a `[C×9]`
    /// kernel, replicate padding.
    pub fn depthwise_conv3x3(&mut self, img: Var, kernel: Var) -> Result<Var> {
        let (it, kt) = (self.value(img), self.value(kernel));
        if it.shape().len() != 3 || kt.shape() != [it.shape()[2], 9] {
            return Err(Error::dim("depthwise_conv3x3", it.shape(), kt.shape()));
        }
        let (h, w, c) = (it.shape()[0], it.shape()[1], it.shape()[2]);
        let mut out = vec![0.0; h * w * c];
        conv_taps(h, w, c, |o, src, tap, ch| {
            out[o] += kt.data()[ch * 9 + tap] * it.data()[src];
        });
        let value = Tensor::new(it.shape().to_vec(), out)?;
        Ok(self.push(Op::DepthwiseConv3x3(img, kernel), value))
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        let adjoints = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap()))
            .collect();
        Ok(Gradients {
            adjoints,
            params: self.params.clone(),
            shapes: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), self.value(*v).shape().to_vec()))
                .collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (n, k) = (at.shape()[0], at.shape()[1]);
                let p = bt.shape()[1];
                matmul_nt_into(g, bt.data(), slot(adj, &self.nodes, *a), n, p, k);
                matmul_tn_into(at.data(), g, slot(adj, &self.nodes, *b), n, k, p);
            }
            Op::Transpose(a) => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let da = slot(adj, &self.nodes, *a);
                for i in 0..n {
                    for j in 0..k {
                        da[i * k + j] += g[j * n + i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(adj, &self.nodes, *a), g, 1.0);
                add_into(slot(adj, &self.nodes, *b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(slot(adj, &self.nodes, *a), g, 1.0);
                add_into(slot(adj, &self.nodes, *b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                let da = slot(adj, &self.nodes, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
                let db = slot(adj, &self.nodes, *b);
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
            Op::AddRow(a, r) => {
                add_into(slot(adj, &self.nodes, *a), g, 1.0);
                let k = self.value(*r).numel();
                let dr = slot(adj, &self.nodes, *r);
                for (i, &gv) in g.iter().enumerate() {
                    dr[i % k] += gv;
                }
            }
            Op::MulRow(a, r) => {
                let rv = self.value(*r).data();
                let av = self.value(*a).data();
                let k = rv.len();
                let da = slot(adj, &self.nodes, *a);
                for (i, &gv) in g.iter().enumerate() {
                    da[i] += gv * rv[i % k];
                }
                let dr = slot(adj, &self.nodes, *r);
                for (i, &gv) in g.iter().enumerate() {
                    dr[i % k] += gv * av[i];
                }
            }
            Op::MulCol(a, c) => {
                let cv = self.value(*c).data();
                let av = self.value(*a).data();
                let k = self.value(*a).shape()[1];
                let da = slot(adj, &self.nodes, *a);
                for (i, &gv) in g.iter().enumerate() {
                    da[i] += gv * cv[i / k];
                }
                let dc = slot(adj, &self.nodes, *c);
                for (i, &gv) in g.iter().enumerate() {
                    dc[i / k] += gv * av[i];
                }
            }
            Op::Scale(a, c) => add_into(slot(adj, &self.nodes, *a), g, *c),
            Op::AddConst(a) => add_into(slot(adj, &self.nodes, *a), g, 1.0),
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                let av = self.value(*a).data();
                let ds: f64 = g.iter().zip(av).map(|(gv, x)| gv * x).sum();
                add_into(slot(adj, &self.nodes, *a), g, c);
                slot(adj, &self.nodes, *s)[0] += ds;
            }
            Op::DivScalar(a, s) => {
                let c = self.value(*s).item();
                // d(x/c)/dc = -(x/c)/c = -out/c
                let ds: f64 = g.iter().zip(val).map(|(gv, y)| -gv * y / c).sum();
                add_into(slot(adj, &self.nodes, *a), g, 1.0 / c);
                slot(adj, &self.nodes, *s)[0] += ds;
            }
            Op::Sigmoid(a) => {
                let da = slot(adj, &self.nodes, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * val[i] * (1.0 - val[i]);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                let da = slot(adj, &self.nodes, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * gelu_grad(av[i]);
                }
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                let da = slot(adj, &self.nodes, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * sigmoid(av[i]);
                }
            }
            Op::Exp(a) => {
                let da = slot(adj, &self.nodes, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * val[i];
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                let da = slot(adj, &self.nodes, *a);
                for i in 0..g.len() {
                    if av[i] >= *lo && av[i] <= *hi {
                        da[i] += g[i];
                    }
                }
            }
            Op::SoftmaxRows(a, tau) => {
                let k = node.value.shape()[1];
                let da = slot(adj, &self.nodes, *a);
                for (r, (yrow, grow)) in val.chunks(k).zip(g.chunks(k)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    for j in 0..k {
                        da[r * k + j] += yrow[j] * (grow[j] - dot) / tau;
                    }
                }
            }
            Op::LayerNormRows(a, eps) => {
                let av = self.value(*a).data();
                let k = node.value.shape()[1];
                let da = slot(adj, &self.nodes, *a);
                for r in 0..g.len() / k {
                    let xrow = &av[r * k..(r + 1) * k];
                    let yrow = &val[r * k..(r + 1) * k];
                    let grow = &g[r * k..(r + 1) * k];
                    let (_, rstd) = row_stats(xrow, *eps);
                    let gmean = grow.iter().sum::<f64>() / k as f64;
                    let gymean = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                    for j in 0..k {
                        da[r * k + j] += rstd * (grow[j] - gmean - yrow[j] * gymean);
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data();
                let scale = 2.0 * g[0] / av.len() as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                add_into(slot(adj, &self.nodes, *a), &diff, 1.0);
                add_into(slot(adj, &self.nodes, *b), &diff, -1.0);
            }
            Op::Sum(a) => {
                let da = slot(adj, &self.nodes, *a);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
            Op::ConcatCols(a, b) => {
                let ka = self.value(*a).shape()[1];
                let kb = self.value(*b).shape()[1];
                let n = self.value(*a).shape()[0];
                let da = slot(adj, &self.nodes, *a);
                for i in 0..n {
                    for j in 0..ka {
                        da[i * ka + j] += g[i * (ka + kb) + j];
                    }
                }
                let db = slot(adj, &self.nodes, *b);
                for i in 0..n {
                    for j in 0..kb {
                        db[i * kb + j] += g[i * (ka + kb) + ka + j];
                    }
                }
            }
            Op::Gather(a, index) => {
                let da = slot(adj, &self.nodes, *a);
                for (i, &src) in index.iter().enumerate() {
                    da[src] += g[i];
                }
            }
            Op::DepthwiseConv3x3(img, kernel) => {
                let it = self.value(*img);
                let kt = self.value(*kernel).data().to_vec();
                let (h, w, c) = (it.shape()[0], it.shape()[1], it.shape()[2]);
                let iv = it.data().to_vec();
                {
                    let di = slot(adj, &self.nodes, *img);
                    conv_taps(h, w, c, |o, src, tap, ch| di[src] += kt[ch * 9 + tap] * g[o]);
                }
                let dk = slot(adj, &self.nodes, *kernel);
                conv_taps(h, w, c, |o, src, tap, ch| dk[ch * 9 + tap] += iv[src] * g[o]);
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let k = row.len() as f64;
    let mean = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Visits `(out_index, src_index, tap, channel)` for a replicate-padded 3×3
/// stencil in ascending output order.
fn conv_taps(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for tap in 0..9 {
                let sy = (y as isize + tap as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + tap as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                for ch in 0..c {
                    f((y * w + x) * c + ch, (sy * w + sx) * c + ch, tap, ch);
                }
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
    shapes: BTreeMap<String, Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros if `v` does not reach
    /// the root.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        self.adjoints
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let v = *self.params.get(name)?;
        Some(self.wrt(v, &self.shapes[name]))
    }

    /// Gradients for every named parameter, zero-filled where detached.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, &v)| (k.clone(), self.wrt(v, &self.shapes[k])))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn detached_param_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::ones(&[2, 2]));
        let _p = tape.param("p", &Tensor::ones(&[3]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("p").unwrap(), Tensor::zeros(&[3]));
    }

    #[test]
    fn nonscalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_operand_accumulates() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap().get("x").unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn conv_identity_kernel_is_noop() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[4, 5, 2], |i| (i as f64).sin());
        let mut k = Tensor::zeros(&[2, 9]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[13] = 1.0;
        let iv = tape.constant(img.clone());
        let kv = tape.constant(k);
        let out = tape.depthwise_conv3x3(iv, kv).unwrap();
        assert_eq!(tape.value(out), &img);
    }
}
