use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::memtrace::{self, Category, Charge};
use crate::scalar::Scalar;

/// Position of a value on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

pub(crate) struct Buffer<T> {
    data: Vec<T>,
    charge: Option<Charge>,
}

impl<T> Buffer<T> {
    fn new(data: Vec<T>) -> Self {
        let charge = Charge::take(memtrace::current_category(), data.len());
        Buffer { data, charge }
    }
}

/// Dense row-major array. Cloning shares the underlying buffer.
///
/// A tensor produced by a recording [`crate::Tape`] remembers which node
/// produced it; everything else is a plain value.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    buf: Arc<Buffer<T>>,
    pub(crate) node: Option<NodeRef>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, buf: Arc::new(Buffer::new(data)), node: None })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, buf: Arc::new(Buffer::new(data)), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![], vec![value])
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self::raw(vec![data.len()], data)
    }

    /// Build a `[rows × cols]` matrix. All rows must share a length; an
    /// empty slice yields `[0 × 0]`.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Ok(Self::raw(vec![rows.len(), cols], rows.concat()))
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let conv: Vec<Vec<T>> =
            rows.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
        Self::from_rows(&conv)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.buf.data
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data()[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data()[0])
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape association.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), buf: self.buf.clone(), node: None }
    }

    pub fn category(&self) -> Option<Category> {
        self.buf.charge.as_ref().map(Charge::category)
    }

    /// Re-tag this tensor's memory. Moves the charge when the buffer is not
    /// shared, copies otherwise.
    pub fn into_category(self, category: Category) -> Self {
        let Tensor { shape, mut buf, .. } = self;
        if let Some(b) = Arc::get_mut(&mut buf) {
            if let Some(ch) = b.charge.as_mut() {
                ch.recategorize(category);
            }
            return Tensor { shape, buf, node: None };
        }
        memtrace::in_category(category, || Self::raw(shape, buf.data.clone()))
    }

    /// Fresh copy of rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.ndim() != 2 || start > end || end > self.shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {:?}", self.shape),
            ));
        }
        let c = self.shape[1];
        Ok(Self::raw(vec![end - start, c], self.data()[start * c..end * c].to_vec()))
    }

    /// Mutable view of the values. Only available while no other handle
    /// shares the buffer and the tensor is not on a tape.
    pub fn data_mut(&mut self) -> Option<&mut [T]> {
        if self.node.is_some() {
            return None;
        }
        Arc::get_mut(&mut self.buf).map(|b| b.data.as_mut_slice())
    }

    /// Overwrite rows starting at `start` with the rows of `src`.
    pub fn write_rows(&mut self, start: usize, src: &Tensor<T>) -> Result<()> {
        let (rows, cols) = (self.rows(), self.cols());
        if self.ndim() != 2 || src.cols() != cols || start + src.rows() > rows {
            return Err(Error::shape(
                "write_rows",
                format!("{:?} at row {start} into {:?}", src.shape, self.shape),
            ));
        }
        let n = src.rows();
        let dst = self
            .data_mut()
            .ok_or_else(|| Error::shape("write_rows", "destination buffer is shared"))?;
        dst[start * cols..(start + n) * cols].copy_from_slice(src.data());
        Ok(())
    }

    /// Elementwise `self += other` when the buffer is exclusively owned,
    /// otherwise a new tensor.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        if let Some(dst) = self.data_mut() {
            for (d, &s) in dst.iter_mut().zip(other.data()) {
                *d += s;
            }
            return Ok(());
        }
        let cat = self.category().unwrap_or_else(memtrace::current_category);
        let sum = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        *self = memtrace::in_category(cat, || Self::raw(self.shape.clone(), sum));
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn same_values(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self.data().iter().zip(other.data()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.buf.data)
            .field("node", &self.node.map(|n| n.index))
            .finish()
    }
}
