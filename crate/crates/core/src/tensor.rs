//! Dense row-major tensors.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. `data.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `rows × cols` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&x| S::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows of a 2-D tensor (or the leading extent of an N-D one).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: S) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return dim_err("transpose needs a matrix");
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Dense product of an `m×k` and a `k×n` matrix.
    ///
    /// Accumulates in ascending `k` for each output cell, so results are
    /// reproducible bit for bit.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return dim_err("matmul needs matrices");
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return dim_err(format!("matmul inner extents {k} vs {k2}"));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::of(x.as_f64())).collect(),
        }
    }

    /// Text dump: a `shape: d1 d2 ...` header line, then the values in
    /// row-major order, one row of the trailing extent per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("shape:");
        for d in &self.shape {
            write!(s, " {d}").unwrap();
        }
        s.push('\n');
        let width = self.shape.last().copied().unwrap_or(1).max(1);
        for chunk in self.data.chunks(width) {
            let line: Vec<String> = chunk
                .iter()
                .map(|x| format!("{:.*e}", S::ROUND_TRIP_DIGITS - 1, x))
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty tensor dump".into(),
        })?;
        let dims = header.strip_prefix("shape:").ok_or(Error::Parse {
            line: 1,
            msg: format!("expected `shape:` header, found {header:?}"),
        })?;
        let shape = dims
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>().map_err(|e| Error::Parse {
                    line: 1,
                    msg: format!("bad extent {d:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for (i, line) in lines {
            for tok in line.split_whitespace() {
                let v = tok.parse::<S>().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad value {tok:?}"),
                })?;
                data.push(v);
            }
        }
        Self::new(shape, data)
    }

    pub fn read_text(r: &mut impl BufRead) -> Result<Self> {
        let mut s = String::new();
        r.read_to_string(&mut s)?;
        Self::parse_text(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let x = Tensor::<f64>::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[0., 1.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_bit_equals_triple_loop() {
        let mut rng = SeededRng::new(11);
        for case in 0..200 {
            let m = 1 + rng.below(16);
            let k = 1 + rng.below(16);
            let n = 1 + rng.below(16);
            let a = rng.gaussian_tensor(&[m, k], 0.0, 1.0);
            let b = rng.gaussian_tensor(&[k, n], 0.0, 1.0);
            assert_eq!(a.matmul(&b).unwrap(), naive(&a, &b), "case {case}");
        }
    }

    #[test]
    fn text_dump_round_trips_exactly() {
        let mut rng = SeededRng::new(3);
        let t = rng.gaussian_tensor(&[3, 4, 2], 0.0, 1e3);
        let text = t.to_text();
        assert!(text.starts_with("shape: 3 4 2\n"));
        assert_eq!(Tensor::<f64>::parse_text(&text).unwrap(), t);
    }

    #[test]
    fn text_dump_uses_17_significant_digits() {
        let t = Tensor::vector(vec![0.1_f64]);
        assert_eq!(t.to_text(), "shape: 1\n1.0000000000000001e-1\n");
    }

    #[test]
    fn parse_rejects_bad_header_and_count() {
        assert!(matches!(
            Tensor::<f64>::parse_text("dims: 2\n1 2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Tensor::<f64>::parse_text("shape: 3\n1 2\n"),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::<f64>::parse_text("shape: 2\n1 x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn f32_tensors_work_too() {
        let a = Tensor::<f32>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let t = a.matmul(&Tensor::identity(2)).unwrap();
        assert_eq!(t, a);
        assert_eq!(Tensor::<f32>::parse_text(&t.to_text()).unwrap(), t);
    }
}
