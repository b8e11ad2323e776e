use std::fmt;

use super::Float;
use crate::error::{Result, SeldError};

/// Dense row-major N-dimensional array.
///
/// `requires_grad` marks trainable leaves; after a backward pass the
/// gradient is copied into `grad` so an optimizer can consume it.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(SeldError::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        Self::new(shape, data).expect("shape matches data length")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor::from_vec(shape, data)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(SeldError::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Converts between element precisions; gradient state is dropped.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(SeldError::NonFinite(what.to_string()))
        }
    }

    /// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        validate_perm(perm, self.rank())?;
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; new_shape.len()];
        if self.data.is_empty() {
            return Tensor::new(new_shape, out);
        }
        let last = new_shape.len() - 1;
        let inner = new_shape[last];
        let inner_stride = src_strides[last];
        loop {
            let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            for j in 0..inner {
                out.push(self.data[base + j * inner_stride]);
            }
            // advance all but the innermost axis
            let mut axis = last;
            loop {
                if axis == 0 {
                    return Tensor::new(new_shape, out);
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < new_shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Splits the leading axis into per-index tensors.
    pub fn unstack(&self) -> Vec<Tensor<T>> {
        let n = self.shape[0];
        let sub: Vec<usize> = self.shape[1..].to_vec();
        let len = numel(&sub);
        (0..n)
            .map(|i| Tensor::from_vec(sub.clone(), self.data[i * len..(i + 1) * len].to_vec()))
            .collect()
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| SeldError::Usage("stack of zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(numel(&shape));
        for t in items {
            if t.shape() != first.shape() {
                return Err(SeldError::dim("stack", first.shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    }
}

pub fn validate_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(SeldError::Config(format!(
            "permutation {perm:?} does not match rank {rank}"
        )));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(SeldError::Config(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
