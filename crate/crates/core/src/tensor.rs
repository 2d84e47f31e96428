//! Dense row-major `f64` tensors of rank at most 3.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return shape_err(format!("rank {} exceeds 3", shape.len()));
        }
        if shape.contains(&0) {
            return shape_err(format!("zero extent in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Build a matrix from nested rows; panics on ragged input, so meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    /// `1 × n` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// `n × 1` column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    /// Rank-1 vector.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.at(r, c)).collect()
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Numerically stable `ln Σ exp(x_i)`; `-inf` for an all-`-inf` input.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `logsumexp` along `axis` of a rank-2 tensor, keeping the reduced axis with extent 1.
///
/// `axis = 0` reduces over rows (result `1 × C`), `axis = 1` over columns (result `R × 1`).
pub fn logsumexp_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if x.rank() != 2 || axis > 1 {
        return shape_err(format!(
            "logsumexp_axis needs a matrix and axis 0|1, got {:?} axis {axis}",
            x.shape()
        ));
    }
    let (r, c) = (x.rows(), x.cols());
    Ok(if axis == 0 {
        let v = (0..c)
            .map(|j| logsumexp((0..r).map(|i| x.at(i, j))))
            .collect();
        Tensor {
            shape: vec![1, c],
            data: v,
        }
    } else {
        let v = (0..r)
            .map(|i| logsumexp(x.row_slice(i).iter().copied()))
            .collect();
        Tensor {
            shape: vec![r, 1],
            data: v,
        }
    })
}

/// Cross-correlation with zero "same" padding.
///
/// `input` is `C_in × T`, `weight` is `C_out × C_in × K` with `K` odd, `bias` has `C_out` values.
pub fn conv1d_same(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 2 || weight.rank() != 3 {
        return shape_err(format!(
            "conv1d_same: input {:?}, weight {:?}",
            input.shape(),
            weight.shape()
        ));
    }
    let (cin, t) = (input.shape[0], input.shape[1]);
    let (cout, wcin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    if wcin != cin || k % 2 == 0 || bias.len() != cout {
        return shape_err(format!(
            "conv1d_same: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; cout * t];
    for c in 0..cout {
        let row = &mut out[c * t..(c + 1) * t];
        row.iter_mut().for_each(|v| *v = bias.data[c]);
        for i in 0..cin {
            let x = &input.data[i * t..(i + 1) * t];
            for kk in 0..k {
                let w = weight.data[(c * cin + i) * k + kk];
                if w == 0.0 {
                    continue;
                }
                // out[t'] += w * x[t' + kk - pad]
                let (lo, hi) = valid_range(t, kk, pad);
                for tt in lo..hi {
                    row[tt] += w * x[tt + kk - pad];
                }
            }
        }
    }
    Tensor::matrix(cout, t, out)
}

/// Output positions `t` for which `t + kk - pad` lies inside `[0, len)`.
pub(crate) fn valid_range(len: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(len);
    (lo, hi.max(lo))
}
