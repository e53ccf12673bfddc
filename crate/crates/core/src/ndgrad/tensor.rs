//! Dense row-major tensors and the reverse-mode tape they record onto.
//!
//! A [`Tensor`] is immutable. Tensors created with [`Tape::param`] (or derived
//! from one) carry a node handle; every op whose inputs include at least one
//! tracked tensor appends a node holding its backward closure. Constants never
//! touch the tape and therefore never receive a gradient.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::error::{NdError, NdResult};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Backward closure: given the upstream gradient of the node output and a
/// mask telling which inputs need a gradient, return one optional gradient
/// per input (shaped like that input).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
    len: usize,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Ordered record of differentiable operations. Cloning shares the record.
pub struct Tape<T> {
    id: u64,
    nodes: Arc<Mutex<Vec<Node<T>>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            nodes: Arc::clone(&self.nodes),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.lock().expect("tape poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `value` as a gradient-receiving leaf on this tape.
    pub fn param(&self, value: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            backward: None,
            len: value.len(),
        });
        Tensor {
            shape: value.shape.clone(),
            data: Arc::clone(&value.data),
            var: Some(Var {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Op names in recording order; mostly useful for debugging.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes
            .lock()
            .expect("tape poisoned")
            .iter()
            .map(|n| n.op)
            .collect()
    }

    fn push(&self, node: Node<T>) -> NodeId {
        let mut nodes = self.nodes.lock().expect("tape poisoned");
        nodes.push(node);
        nodes.len() - 1
    }

    /// Reverse sweep from `loss`. Does not consume the tape, so repeated calls
    /// return identical gradients.
    pub fn backward(&self, loss: &Tensor<T>) -> NdResult<Gradients<T>> {
        if loss.len() != 1 {
            return Err(NdError::NotScalar {
                shape: loss.shape.clone(),
            });
        }
        let var = loss.var.as_ref().ok_or(NdError::DetachedTensor)?;
        if var.tape.id != self.id {
            return Err(NdError::TapeMismatch);
        }
        let nodes = self.nodes.lock().expect("tape poisoned");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; var.id + 1];
        grads[var.id] = Some(vec![T::one()]);
        for id in (0..=var.id).rev() {
            let node = &nodes[id];
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            let Some(backward) = node.backward.as_ref() else { continue };
            debug_assert_eq!(g.len(), node.len);
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(g, &needs);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(src), Some(ig)) = (slot, ig) else { continue };
                match &mut lower[*src] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                    empty => *empty = Some(ig),
                }
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

#[derive(Clone)]
pub(crate) struct Var<T> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: NodeId,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    tape_id: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `t`, or `None` if `t` is untracked or the
    /// loss does not depend on it.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let var = t.var.as_ref()?;
        if var.tape_id() != self.tape_id {
            return None;
        }
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(t.shape.clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but returns zeros when no gradient reached `t`.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        self.get(t).unwrap_or_else(|| Tensor::zeros(&t.shape))
    }
}

impl<T> Var<T> {
    fn tape_id(&self) -> u64 {
        self.tape.id
    }
}

/// Dense row-major tensor.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) var: Option<Var<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.requires_grad())
            .field("head", &head)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> NdResult<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != data.len() {
            return Err(NdError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            var: None,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> NdResult<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![T::zero()] } else { data };
        Self::from_parts(vec![n], data)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut d = vec![T::zero(); n * n];
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        Self::from_parts(vec![n, n], d)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> NdResult<T> {
        if self.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NdError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.var.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.var.as_ref().map(|v| v.id)
    }

    pub fn tape(&self) -> Option<Tape<T>> {
        self.var.as_ref().map(|v| v.tape.clone())
    }

    /// Same values, cut off from any tape.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            var: None,
        }
    }

    /// Records an op producing `data` with `shape` from `inputs`.
    ///
    /// The backward closure is only kept if some input is tracked.
    pub(crate) fn record<D, F>(
        op: &'static str,
        inputs: &[&Tensor<T>],
        shape: Vec<usize>,
        data: D,
        backward: F,
    ) -> NdResult<Self>
    where
        D: Into<Arc<Vec<T>>>,
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let data: Arc<Vec<T>> = data.into();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NdError::NonFinite { op });
        }
        let mut tape: Option<&Tape<T>> = None;
        for t in inputs {
            if let Some(v) = &t.var {
                match tape {
                    None => tape = Some(&v.tape),
                    Some(tp) if tp.id != v.tape.id => return Err(NdError::TapeMismatch),
                    _ => {}
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Self { shape, data, var: None });
        };
        let len = data.len();
        let id = tape.push(Node {
            op,
            inputs: inputs.iter().map(|t| t.var.as_ref().map(|v| v.id)).collect(),
            backward: Some(Box::new(backward)),
            len,
        });
        Ok(Self {
            shape,
            data,
            var: Some(Var {
                tape: tape.clone(),
                id,
            }),
        })
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> NdResult<T> {
        if self.shape != other.shape {
            return Err(NdError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max))
    }
}
