//! Dense row-major tensors. Shapes are dynamic (rank 0..4 in practice);
//! all graph ops operate on these.

use super::scalar::Scalar;

/// Dense row-major tensor with a dynamic shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} holds {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Element at a row-major 2-d index; tensor must be rank 2.
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulate");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Self { shape: shape.to_vec(), data: self.data.clone() }
    }

    /// Convert elementwise to another scalar type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::c(x.f64())).collect() }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Width of one row when treating the first axis as rows.
    fn row_width(&self) -> usize {
        assert!(!self.shape.is_empty(), "row ops need rank >= 1");
        self.shape[1..].iter().product()
    }

    /// Row `i` along the first axis, flattened.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_width();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Keep rows where `keep` is true; first axis shrinks accordingly.
    pub fn retain_rows(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.shape[0], "mask length vs rows");
        let w = self.row_width();
        let mut data = Vec::with_capacity(keep.iter().filter(|&&k| k).count() * w);
        for (i, &k) in keep.iter().enumerate() {
            if k {
                data.extend_from_slice(self.row(i));
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = data.len() / w.max(1);
        Self { shape, data }
    }

    /// Stack rows of `other` beneath rows of `self` (first axis grows).
    pub fn concat_rows(&self, other: &Self) -> Self {
        assert_eq!(self.shape[1..], other.shape[1..], "row shapes differ");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut shape = self.shape.clone();
        shape[0] += other.shape[0];
        Self { shape, data }
    }

    /// Largest absolute element, or zero for an empty tensor.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
