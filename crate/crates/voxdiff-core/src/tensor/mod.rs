//! N-dimensional numeric arrays with reverse-mode automatic differentiation.
//!
//! The operation set is exactly what the denoiser needs: 3D convolution,
//! linear maps, matrix multiply, softmax, group normalization, SiLU/GELU,
//! elementwise arithmetic, concatenation, gather/reshape, trilinear
//! resampling and reductions. Values are `f64`; gradients are accumulated
//! into leaf tensors by [`Tensor::backward`].

mod check;
mod ops;

pub use check::finite_difference_check;
pub use ops::phi;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Backward closure: given the op context and the output gradient, produce
/// one gradient buffer per parent (same shape as the parent).
pub(crate) type BackFn =
    Box<dyn Fn(&BackCtx<'_>) -> Vec<Vec<f64>> + Send + Sync>;

pub(crate) struct BackCtx<'a> {
    pub parents: &'a [Tensor],
    pub out_data: &'a [f64],
    pub grad: &'a [f64],
}

pub(crate) enum Node {
    Constant,
    Leaf { grad: Mutex<Vec<f64>> },
    Op { parents: Vec<Tensor>, back: BackFn },
}

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Node,
}

/// A shared, immutable n-dimensional array participating in reverse-mode
/// differentiation. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient tracking disabled on this thread. Operations
/// performed inside build no graph, so inference costs no tape memory.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, node: Node) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner { shape, data, node }),
        }
    }

    /// A tensor that never tracks gradients.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "constant",
                msg: format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    shape.iter().product::<usize>(),
                    data.len()
                ),
            });
        }
        Ok(Tensor::new(shape.to_vec(), data, Node::Constant))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v], Node::Constant)
    }

    /// A trainable leaf. Gradients accumulate here during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "param",
                msg: format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    shape.iter().product::<usize>(),
                    data.len()
                ),
            });
        }
        Ok(Tensor::new(
            shape.to_vec(),
            data,
            Node::Leaf {
                grad: Mutex::new(Vec::new()),
            },
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n], Node::Constant)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.inner.node, Node::Constant)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.node, Node::Leaf { .. })
    }

    /// Same values, no provenance. Detached tensors never accumulate gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::new(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            Node::Constant,
        )
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        match &self.inner.node {
            Node::Leaf { grad } => {
                let g = grad.lock().unwrap();
                if g.is_empty() {
                    None
                } else {
                    Some(g.clone())
                }
            }
            _ => None,
        }
    }

    pub fn zero_grad(&self) {
        if let Node::Leaf { grad } = &self.inner.node {
            grad.lock().unwrap().clear();
        }
    }

    /// Takes and clears the accumulated gradient of a leaf.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        match &self.inner.node {
            Node::Leaf { grad } => {
                let mut g = grad.lock().unwrap();
                if g.is_empty() {
                    None
                } else {
                    Some(std::mem::take(&mut *g))
                }
            }
            _ => None,
        }
    }

    fn ptr(&self) -> *const Inner {
        Arc::as_ptr(&self.inner)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        back: BackFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let node = if track {
            Node::Op { parents, back }
        } else {
            Node::Constant
        };
        Tensor::new(shape, data, node)
    }

    /// Reverse-mode pass from a scalar loss. Every reachable leaf accumulates
    /// `d loss / d leaf` into its gradient buffer.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        // Post-order DFS for a topological order of the reachable graph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Node::Op { parents, .. } = &t.inner.node {
                for p in parents {
                    if p.requires_grad() && !visited.contains(&p.ptr()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        grads.insert(self.ptr(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.ptr()) else {
                continue;
            };
            match &t.inner.node {
                Node::Constant => {}
                Node::Leaf { grad } => {
                    let mut acc = grad.lock().unwrap();
                    if acc.is_empty() {
                        *acc = g;
                    } else {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
                Node::Op { parents, back } => {
                    let ctx = BackCtx {
                        parents,
                        out_data: &t.inner.data,
                        grad: &g,
                    };
                    let pgrads = back(&ctx);
                    debug_assert_eq!(pgrads.len(), parents.len());
                    for (p, pg) in parents.iter().zip(pgrads) {
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.entry(p.ptr()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            x.backward(),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detached_tensor_accumulates_no_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let d = x.detach();
        let loss = d.mul(&d).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_linearity() {
        // backward of a sum of losses equals sum of backwards
        let x = Tensor::param(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let l1 = x.mul(&x).unwrap().sum_all();
        let l2 = x.exp().sum_all();
        let combined = l1.add(&l2).unwrap();
        combined.backward().unwrap();
        let g_combined = x.take_grad().unwrap();

        let l1 = x.mul(&x).unwrap().sum_all();
        l1.backward().unwrap();
        let g1 = x.take_grad().unwrap();
        let l2 = x.exp().sum_all();
        l2.backward().unwrap();
        let g2 = x.take_grad().unwrap();

        for i in 0..3 {
            assert!((g_combined[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
    }

    #[test]
    fn shared_subexpression_grad_accumulates() {
        // loss = (x + x) . 1 => dloss/dx = 2
        let x = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        let y = x.add(&x).unwrap();
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }
}
