//! Reverse-mode automatic differentiation over dense, row-major 2-D matrices.
//!
//! The graph is a DAG of reference-counted nodes. Each operation allocates a
//! new node holding its forward values, handles to its parents and a closure
//! that routes output gradients to parent gradients. Calling
//! [`Tensor::backward`] on a scalar seeds it with gradient 1 and walks the
//! graph once in reverse topological order.
//!
//! Two element types are supported: `f32` for training and `f64` for
//! gradient checking. Nodes whose inputs all have gradient tracking disabled
//! are folded into constants, so a forward pass over constant parameters (the
//! teacher network, frozen backbones, augmentation previews) retains no graph.

mod fastmath;
pub mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{CoreError, Result};

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
pub trait Element:
    num_traits::Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Default + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `tanh` for bulk elementwise kernels.
    ///
    /// Exact libm for `f64`, so gradient checks keep full precision. For
    /// `f32` a branch-free rational approximation within a few ulps whose
    /// loops the compiler can vectorize; see [`fastmath`](self) internals.
    fn tanh_fast(self) -> Self;

    /// `exp` for bulk elementwise kernels, same contract as
    /// [`tanh_fast`](Element::tanh_fast): exact for `f64`, a few ulps and
    /// vectorizable for `f32`.
    fn exp_fast(self) -> Self;

    /// `c += a · b` when `beta` is one, `c = a · b` when `beta` is zero.
    ///
    /// `a` is `m x k` and `b` is `k x n`, each addressed through explicit
    /// row/column strides so transposed views need no copy; `c` is `m x n`
    /// row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_rs: isize,
        a_cs: isize,
        b: &[Self],
        b_rs: isize,
        b_cs: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr, $gemm:path, $tanh:expr, $exp:expr) => {
        impl Element for $ty {
            const DTYPE: &'static str = $dtype;

            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline(always)]
            fn tanh_fast(self) -> Self {
                $tanh(self)
            }

            #[inline(always)]
            fn exp_fast(self) -> Self {
                $exp(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_rs: isize,
                a_cs: isize,
                b: &[Self],
                b_rs: isize,
                b_cs: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() == m * n, "gemm: output buffer length mismatch");
                let a_max = (m - 1) as isize * a_rs + (k.max(1) - 1) as isize * a_cs;
                let b_max = (k.max(1) - 1) as isize * b_rs + (n - 1) as isize * b_cs;
                assert!(a_max >= 0 && (a_max as usize) < a.len().max(1), "gemm: lhs stride out of bounds");
                assert!(b_max >= 0 && (b_max as usize) < b.len().max(1), "gemm: rhs stride out of bounds");
                if k == 0 {
                    if beta == 0.0 {
                        c.fill(0.0);
                    }
                    return;
                }
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_rs,
                        a_cs,
                        b.as_ptr(),
                        b_rs,
                        b_cs,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm, fastmath::tanh_f32, fastmath::exp_f32);
impl_element!(f64, "f64", matrixmultiply::dgemm, f64::tanh, f64::exp);

type BackwardFn<E> = Box<dyn Fn(&Node<E>)>;

pub(crate) struct Node<E: Element> {
    shape: (usize, usize),
    values: Vec<E>,
    grad: RefCell<Option<Vec<E>>>,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
    needs_grad: bool,
}

impl<E: Element> Node<E> {
    pub(crate) fn values(&self) -> &[E] {
        &self.values
    }

    pub(crate) fn parent(&self, i: usize) -> &Tensor<E> {
        &self.parents[i]
    }
}

/// Dense row-major 2-D matrix participating in the autodiff graph.
///
/// Cloning is cheap (reference-counted handle). Values are immutable after
/// construction; gradients accumulate in an interior cell during backward.
pub struct Tensor<E: Element>(Rc<Node<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("needs_grad", &self.0.needs_grad)
            .finish()
    }
}

fn check_len<E: Element>(values: &[E], rows: usize, cols: usize) -> Result<()> {
    if values.len() != rows * cols {
        return Err(CoreError::shape(
            "tensor",
            format!("{} values for shape ({rows}, {cols})", values.len()),
        ));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    /// Trainable input: participates in backward and accumulates a gradient.
    pub fn leaf(values: Vec<E>, rows: usize, cols: usize) -> Result<Self> {
        check_len(&values, rows, cols)?;
        Ok(Tensor(Rc::new(Node {
            shape: (rows, cols),
            values,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        })))
    }

    /// Non-trainable input: ops over constants alone retain no graph.
    pub fn constant(values: Vec<E>, rows: usize, cols: usize) -> Result<Self> {
        check_len(&values, rows, cols)?;
        Ok(Tensor(Rc::new(Node {
            shape: (rows, cols),
            values,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        })))
    }

    pub(crate) fn from_op(
        values: Vec<E>,
        shape: (usize, usize),
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        debug_assert_eq!(values.len(), shape.0 * shape.1);
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        if !needs_grad {
            return Tensor(Rc::new(Node {
                shape,
                values,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                needs_grad: false,
            }));
        }
        Tensor(Rc::new(Node {
            shape,
            values,
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
            needs_grad: true,
        }))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape
    }

    pub fn rows(&self) -> usize {
        self.0.shape.0
    }

    pub fn cols(&self) -> usize {
        self.0.shape.1
    }

    pub fn len(&self) -> usize {
        self.0.shape.0 * self.0.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[E] {
        &self.0.values
    }

    /// Single stored value; panics if the tensor is not 1 x 1.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.0.values[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Copy of the accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    /// Move the accumulated gradient out, leaving the slot empty.
    pub fn take_grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow_mut().take()
    }

    /// Constant copy of the forward values, cut off from the graph.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::constant(self.0.values.clone(), self.rows(), self.cols())
            .expect("detach preserves shape")
    }

    pub(crate) fn accumulate(&self, write: impl FnOnce(&mut [E])) {
        if !self.0.needs_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::zero(); self.len()]);
        write(buf);
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Seeds this node with gradient 1 and propagates through every ancestor
    /// that tracks gradients. Errors if the tensor is not scalar or if it is
    /// disconnected from every trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(CoreError::shape(
                "backward",
                format!("root must be 1 x 1, got ({}, {})", self.rows(), self.cols()),
            ));
        }
        if !self.0.needs_grad {
            return Err(CoreError::invalid(
                "backward",
                "root does not depend on any gradient-tracking tensor",
            ));
        }
        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(vec![E::one()]);
        for node in order.iter().rev() {
            if let Some(bw) = &node.0.backward {
                bw(&node.0);
            }
        }
        Ok(())
    }

    /// Post-order DFS over gradient-tracking ancestors: every node appears
    /// after all of its parents.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        visited.insert(self.ptr_id());
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, next_parent)) = stack.pop() {
            if next_parent < node.0.parents.len() {
                stack.push((node.clone(), next_parent + 1));
                let parent = node.0.parents[next_parent].clone();
                if parent.0.needs_grad && visited.insert(parent.ptr_id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
