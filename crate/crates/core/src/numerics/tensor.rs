use crate::error::{Error, Result};
use crate::numerics::real::{gemm, Real};

/// Dense row-major n-dimensional array.
///
/// Construction rejects non-finite values and shape/length mismatches, so
/// every `Tensor` that exists holds `product(shape)` finite scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<R>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction (index {pos})")));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// length matches the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![R::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = R::one();
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> R) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![r, c], rows.iter().flatten().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> R {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self> {
        self.check_same_shape(other)?;
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: R) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Matrix product accumulated in f64 with a fixed (ascending k) order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let a = a.as_f64();
                let b_row = &other.data[p * n..(p + 1) * n];
                for (dst, &b) in acc.iter_mut().zip(b_row) {
                    *dst += a * b.as_f64();
                }
            }
            out.extend(acc.iter().map(|&v| R::lit(v)));
        }
        Self::new(vec![m, n], out)
    }

    /// Matrix product through the blocked GEMM kernel (native precision).
    pub fn matmul_fast(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let mut out = vec![R::zero(); m * n];
        gemm(false, false, m, n, k, R::one(), &self.data, &other.data, R::zero(), &mut out);
        Self::new(vec![m, n], out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| S::lit(v.as_f64())).collect(),
        )
    }
}
