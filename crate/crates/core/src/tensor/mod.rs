//! Dense 4-D tensors, their differentiable kernels, and the reverse-mode graph.

mod container;
mod gradcheck;
mod graph;
pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

pub use container::{decode_container, encode_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Fault, Gradients, Graph, NodeId, OpKind, UpsampleMode};

/// Batch, channels, height, width.
pub type Dims = [usize; 4];

/// Dense batch/channel/height/width tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "dims {dims:?} need {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// A 1x1x1x1 tensor holding `value`.
    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The single value of a 1x1x1x1 tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("expected a scalar tensor, got dims {:?}", self.dims),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `other * alpha` elementwise.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims, "axpy on different shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Channel plane `c` of batch item `n` as a flat slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let size = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * size;
        &self.data[start..start + size]
    }
}

/// Index of a parameter inside a [`ParamSet`].
pub type ParamId = usize;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces a parameter and returns its id.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.entries[id].1 = value;
            return id;
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push((name, value));
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.entries[id].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let id = self.id(name)?;
        Some(&mut self.entries[id].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].1
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, t.cast());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.data()[t.offset(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.at(0, 1, 2, 3), 123.0);
        assert_eq!(t.plane(1, 0)[6], 1011.0);
    }

    #[test]
    fn precision_follows_scalar() {
        assert_eq!(Tensor::<f32>::scalar(1.0).precision(), Precision::Standard);
        assert_eq!(
            Tensor::<f64>::scalar(1.0).precision(),
            Precision::Verification
        );
    }

    #[test]
    fn param_set_replaces_in_place() {
        let mut p = ParamSet::<f32>::new();
        let a = p.insert("a", Tensor::scalar(1.0));
        let b = p.insert("b", Tensor::scalar(2.0));
        assert_eq!(p.insert("a", Tensor::scalar(3.0)), a);
        assert_ne!(a, b);
        assert_eq!(p.get("a").unwrap().item().unwrap(), 3.0);
        assert_eq!(p.names().collect::<Vec<_>>(), ["a", "b"]);
        assert!(matches!(p.require("c"), Err(Error::MissingParameter(_))));
    }
}
