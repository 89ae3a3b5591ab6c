//! Dense tensors with reverse-mode automatic differentiation.
//!
//! All values live on a [`Tape`]: an append-only arena of nodes, each holding
//! a row-major buffer plus the operation that produced it. [`Tensor`] is a
//! cheap handle (node id + shape) into one tape. Running [`Tape::backward`]
//! on a scalar replays the recorded operations in reverse and returns a
//! gradient buffer for every node that needed one.
//!
//! A tape belongs to one thread; handles and the host-side buffers they
//! describe are plain data and can be moved freely.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub(crate) mod backward;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
#[cfg(test)]
mod tests;

pub use ops::Op;

/// Floating-point element type a tape can operate on.
///
/// Training runs at `f32`; finite-difference validation runs at `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: Dtype;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn powf(self, p: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn read_le_bytes(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $bytes:expr) => {
        impl Element for $t {
            const DTYPE: Dtype = $dtype;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn powf(self, p: Self) -> Self {
                self.powf(p)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le_bytes(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, Dtype::F32, 4);
impl_element!(f64, Dtype::F64, 8);

/// Serialized element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes violate the operation's shape rule.
    ShapeMismatch { op: &'static str, detail: String },
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    /// `backward` was asked to run from a non-scalar value.
    NotScalar { numel: usize },
    /// A handle from a different tape was passed in.
    ForeignTensor { op: &'static str },
    NonFinite { op: &'static str },
    InvalidArg { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            TensorError::AxisOutOfRange { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::NotScalar { numel } => {
                write!(f, "backward: loss must be a scalar, got {numel} elements")
            }
            TensorError::ForeignTensor { op } => {
                write!(f, "{op}: tensor belongs to a different tape")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            TensorError::InvalidArg { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<V> = std::result::Result<V, TensorError>;

/// Handle to a value on a tape. Cloning is cheap; the buffer stays put.
#[derive(Debug, Clone)]
pub struct Tensor {
    id: usize,
    tape_tag: u64,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) struct Node<T: Element> {
    pub data: Arc<Vec<T>>,
    pub shape: Vec<usize>,
    /// For a leaf: registered with `requires_grad`. For an interior node:
    /// true when any ancestor requires a gradient.
    pub needs_grad: bool,
    pub op: Op<T>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Append-only record of forward operations, replayable in reverse.
pub struct Tape<T: Element> {
    tag: u64,
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            tag: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Scan every op output for NaN/Inf and fail fast. Off by default;
    /// enabled by the validation suites.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf value. `requires_grad` marks it as a parameter whose
    /// gradient `backward` must populate.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: T) -> Tensor {
        self.leaf(vec![value], vec![1], false).expect("scalar leaf")
    }

    pub fn value(&self, t: &Tensor) -> &[T] {
        assert_eq!(t.tape_tag, self.tag, "tensor belongs to a different tape");
        &self.nodes[t.id].data
    }

    /// Scalar convenience accessor; panics if `t` is not a single element.
    pub fn scalar_value(&self, t: &Tensor) -> T {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "expected scalar, got {} elements", v.len());
        v[0]
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: Op<T>,
    ) -> Tensor {
        self.push_shared(Arc::new(data), shape, needs_grad, op)
    }

    pub(crate) fn push_shared(
        &mut self,
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: Op<T>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape: shape.clone(),
            needs_grad,
            op,
        });
        Tensor {
            id,
            tape_tag: self.tag,
            shape,
        }
    }

    pub(crate) fn node(&self, id: usize) -> &Node<T> {
        &self.nodes[id]
    }

    pub(crate) fn check_tensor(&self, t: &Tensor, op: &'static str) -> Result<()> {
        if t.tape_tag != self.tag || t.id >= self.nodes.len() {
            return Err(TensorError::ForeignTensor { op });
        }
        Ok(())
    }

    pub(crate) fn finite_check(&self, data: &[T], op: &'static str) -> Result<()> {
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    /// Forget everything recorded at or after `mark` (see [`Tape::mark`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn mark(&self) -> usize {
        self.nodes.len()
    }
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients<T: Element> {
    tape_tag: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. `t`, if one was reachable.
    pub fn get(&self, t: &Tensor) -> Option<&[T]> {
        assert_eq!(t.tape_tag, self.tape_tag, "gradients from a different tape");
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    pub(crate) fn new(tape_tag: u64, grads: Vec<Option<Vec<T>>>) -> Self {
        Gradients { tape_tag, grads }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}
