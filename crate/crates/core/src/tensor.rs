use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Images and feature maps use `N×C×H×W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected rank-4 NCHW tensor, got {:?}", self.shape)),
        }
    }

    /// `(n, f)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, f] => Ok((n, f)),
            _ => Err(shape_err!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        if self.data.is_empty() {
            return S::zero();
        }
        self.sum() / S::lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::lit(v.as_f64())).collect(),
        }
    }

    /// Element `i` of the leading (batch) axis, keeping a leading axis of size 1.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| shape_err!("rank-0 tensor has no batch axis"))?;
        if i >= n {
            return Err(shape_err!("batch index {i} out of range {n}"));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: self.data[i * stride..(i + 1) * stride].to_vec() })
    }

    /// Concatenate along the leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::with_capacity(first.data.len() * items.len());
        for t in items {
            if t.shape.is_empty() || &t.shape[1..] != tail {
                return Err(shape_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }

    /// Prepend a batch axis of size 1.
    pub fn unsqueeze0(self) -> Self {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Self { shape, data: self.data }
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (n, ca, h, w) = a.dims4()?;
        let (nb, cb, hb, wb) = b.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!("concat_channels: {:?} vs {:?}", a.shape, b.shape));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&b.data[i * cb * hw..(i + 1) * cb * hw]);
        }
        Ok(Self { shape: vec![n, ca + cb, h, w], data })
    }

    /// Inverse of [`Tensor::concat_channels`]: split after the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> Result<(Self, Self)> {
        let (n, c, h, w) = self.dims4()?;
        if ca > c {
            return Err(shape_err!("split at {ca} exceeds {c} channels"));
        }
        let cb = c - ca;
        let hw = h * w;
        let mut a = Vec::with_capacity(n * ca * hw);
        let mut b = Vec::with_capacity(n * cb * hw);
        for i in 0..n {
            let base = i * c * hw;
            a.extend_from_slice(&self.data[base..base + ca * hw]);
            b.extend_from_slice(&self.data[base + ca * hw..base + c * hw]);
        }
        Ok((Self { shape: vec![n, ca, h, w], data: a }, Self { shape: vec![n, cb, h, w], data: b }))
    }
}
