//! Dense row-major f32 tensors and the forward-pass counter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 32-bit floats with an optional gradient
/// buffer of the same length. Reductions that produce tensor values
/// accumulate in f64 and round to f32 once per element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape_mismatch(
                "tensor construction",
                format!("{} elements for shape {shape:?}", n),
                data.len(),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Install a gradient buffer; must match the data length.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape_mismatch(
                "gradient buffer",
                self.data.len(),
                grad.len(),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Counts whole-network forward passes (one per batch evaluated).
///
/// Cheap to clone; clones share the underlying counter, so probes running
/// on cloned weight stores still report into one tally.
#[derive(Debug, Clone, Default)]
pub struct PassCounter {
    inner: Arc<AtomicU64>,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.inner.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.inner.store(0, Ordering::Relaxed);
    }

    pub(crate) fn bump(&self) {
        self.inner.fetch_add(1, Ordering::Relaxed);
    }
}
