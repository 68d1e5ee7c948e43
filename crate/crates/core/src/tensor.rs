//! Dense row-major `f64` arrays and the forward kernels shared by the tape.

use crate::error::{Error, Result};

/// Row-major dense array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not describe {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("shape is never empty");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.as_matrix_dims();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &NdArray) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &NdArray) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over raw slices with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // a is stored m×k (or k×m when transposed), b is k×n (or n×k)
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = NdArray::zeros(&[m, n]);
    gemm(m, k, n, 1.0, &a.data, false, &b.data, false, 0.0, &mut out.data);
    Ok(out)
}

/// In-place stabilized softmax of one contiguous row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax along `axis`, stabilized by max subtraction.
pub fn softmax(x: &NdArray, axis: usize) -> Result<NdArray> {
    if axis >= x.shape.len() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape
        )));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = x.data[base + j * inner];
            }
            softmax_row(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                out.data[base + j * inner] = *v;
            }
        }
    }
    Ok(out)
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &NdArray, gain: &NdArray, bias: &NdArray, eps: f64) -> Result<NdArray> {
    Ok(layer_norm_cached(x, gain, bias, eps)?.0)
}

/// Layer norm returning the normalized rows and per-row reciprocal std for backward.
pub(crate) fn layer_norm_cached(
    x: &NdArray,
    gain: &NdArray,
    bias: &NdArray,
    eps: f64,
) -> Result<(NdArray, Vec<f64>, Vec<f64>)> {
    let (rows, cols) = x.as_matrix_dims();
    if cols == 0 {
        return Err(Error::Shape("layer norm over an empty last axis".into()));
    }
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Shape(format!(
            "layer norm gain/bias of length {}/{} for last axis {cols}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            out.data[r * cols + c] = h * gain.data[c] + bias.data[c];
        }
    }
    Ok((out, xhat, rstd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_products() {
        let i2 = NdArray::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = NdArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &i2).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let a = NdArray::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = NdArray::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = NdArray::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let x = NdArray::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = NdArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in s.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-5);
        }
        let shifted = NdArray::new(vec![3], vec![101.0, 102.0, 103.0]).unwrap();
        assert!(softmax(&shifted, 0).unwrap().max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = NdArray::from_rows(&[vec![1.0, 5.0], vec![1.0, -5.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = NdArray::full(&[2], 1.0);
        let zero = NdArray::zeros(&[2]);
        let c = NdArray::full(&[1, 2], 3.0);
        assert_eq!(layer_norm(&c, &one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0]);

        let x = NdArray::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &one, &zero, 1e-14).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let b = NdArray::new(vec![2], vec![0.5, -2.0]).unwrap();
        let y = layer_norm(&x, &zero, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -2.0]);
    }

    #[test]
    fn shape_validation() {
        assert!(NdArray::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(NdArray::new(vec![0], vec![]).is_err());
    }
}
