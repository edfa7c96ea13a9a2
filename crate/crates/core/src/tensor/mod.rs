//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The engine runs on `f32` in production; every op is generic over [`Real`]
//! so gradient tests can instantiate the identical computation in `f64`
//! where central finite differences are meaningful.

mod conv;
mod norm;
mod ops;
mod tape;

pub use norm::{BatchStats, BnStats};
pub use tape::{Gradients, Tape};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar element type of the engine: `f32` in production, `f64` in
/// gradient-verification tests.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Cloning is cheap (the buffer is shared).
///
/// A tensor recorded on a [`Tape`] carries the id of its tape node; backward
/// passes accumulate gradients per node, so reusing one tensor in several
/// ops sums the gradient contributions.
#[derive(Clone)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<usize>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![F::zero(); numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| F::of_f64(x)).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy: same buffer, no tape node.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Reinterpret the buffer under a new shape of equal size. Shares both
    /// the data and the tape node, so gradients flow to the original.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    pub fn scalar_value(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Count of exactly-zero entries' complement (nonzero entries).
    pub fn count_nonzero(&self) -> u64 {
        self.data.iter().filter(|x| !x.is_zero()).count() as u64
    }

    pub(crate) fn with_node(mut self, node: Option<usize>) -> Self {
        self.node = node;
        self
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    /// Mutate the buffer in place when uniquely owned, cloning it first if a
    /// live tape still shares it. Drops any tape association.
    pub(crate) fn apply_mut(&mut self, f: impl FnOnce(&mut [F])) {
        self.node = None;
        f(Arc::make_mut(&mut self.data).as_mut_slice());
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}{}",
            self.shape,
            if self.node.is_some() { " (tracked)" } else { "" }
        )?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

pub(crate) fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn expect_rank<F: Real>(op: &'static str, t: &Tensor<F>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {}, got shape {:?}", rank, t.shape()),
        ));
    }
    Ok(())
}
