use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// Scalars are represented with shape `[1]`. Every reduction walks indices in
/// ascending order so repeated runs are bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all extents after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, k) = self.require_2d("transpose")?;
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                out[j * n + i] = self.data[i * k + j];
            }
        }
        Tensor::new(vec![k, n], out)
    }

    /// Standard matrix product `[n×k]·[k×p]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.require_2d("matmul")?;
        let (k2, p) = other.require_2d("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; n * p];
        matmul_into(&self.data, &other.data, &mut out, n, k, p);
        Tensor::new(vec![n, p], out)
    }
}

/// `out += a·b` with `a: [n×k]`, `b: [k×p]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * p..(l + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a·bᵀ` with `a: [n×k]`, `b: [p×k]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for l in 0..k {
                s += arow[l] * brow[l];
            }
            out[i * p + j] += s;
        }
    }
}

/// `out += aᵀ·b` with `a: [n×k]`, `b: [n×p]`, `out: [k×p]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let brow = &b[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * p..(l + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax of `logits / temperature`, max-subtracted.
pub fn softmax_rows(a: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature.is_nan() || temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if a.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "softmax_rows expects a matrix, got {:?}",
            a.shape()
        )));
    }
    let k = a.cols();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(k) {
        softmax_in_place(row, temperature);
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let m = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        assert_eq!(Tensor::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn zero_matmul_annihilates() {
        let m = Tensor::from_fn(&[3, 4], |i| i as f64 + 1.0);
        let out = Tensor::zeros(&[2, 3]).matmul(&m).unwrap();
        assert_eq!(out, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn small_matmul_matches_triple_loop() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let out = a.matmul(&b).unwrap();
        // brute force
        let mut expect = [0.0; 2];
        for i in 0..2 {
            for l in 0..2 {
                expect[i] += a.at(i, l) * b.at(l, 0);
            }
        }
        assert_eq!(expect, [17.0, 39.0]);
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3]), 1.0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let hot = Tensor::from_rows(&[&[5.0, -3.0, 7.0]]).unwrap();
        for &v in softmax_rows(&hot, 1e9).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let two = softmax_rows(&Tensor::from_rows(&[&[1.0, 2.0]]).unwrap(), 1.0).unwrap();
        assert!((two.data()[0] - 0.268941).abs() < 1e-6);
        assert!((two.data()[1] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        assert!(matches!(
            softmax_rows(&Tensor::zeros(&[1, 2]), 0.0),
            Err(Error::Domain(_))
        ));
        assert!(softmax_rows(&Tensor::zeros(&[1, 2]), -1.0).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
