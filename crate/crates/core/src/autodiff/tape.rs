use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, OpKind};
use crate::error::{Error, Result};
use crate::memtrace::{self, Category};
use crate::scalar::Scalar;
use crate::tensor::{NodeRef, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

enum Rule<T> {
    Leaf,
    Op(OpKind<T>),
}

struct Node<T> {
    rule: Rule<T>,
    /// Position of each input on this tape, `None` for constants.
    inputs: Vec<Option<usize>>,
    input_values: Vec<Tensor<T>>,
    value: Tensor<T>,
    grad_category: Option<Category>,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Operations are recorded only while the tape is recording and at least
/// one input is attached to it (a [`Tape::leaf`] or the output of an earlier
/// recorded op); everything else is evaluated as a plain value. Gradients
/// from [`Tape::backward`] are kept on the tape until
/// [`Tape::reset_grads`].
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Tensor<T>>>>>,
    recording: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Run `f` without recording anything on this tape. Tensors produced
    /// inside carry no node reference.
    pub fn no_graph<R>(&self, f: impl FnOnce() -> R) -> R {
        struct Restore<'a>(&'a Cell<bool>, bool);
        impl Drop for Restore<'_> {
            fn drop(&mut self) {
                self.0.set(self.1);
            }
        }
        let _restore = Restore(&self.recording, self.recording.replace(false));
        f()
    }

    /// Register `value` as a differentiable input.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        self.push_leaf(value, None)
    }

    /// Like [`Tape::leaf`], but this leaf's gradient is charged to
    /// `category` instead of the leaf's own memory category.
    pub fn leaf_with_grad_category(&self, value: &Tensor<T>, category: Category) -> Tensor<T> {
        self.push_leaf(value, Some(category))
    }

    fn push_leaf(&self, value: &Tensor<T>, grad_category: Option<Category>) -> Tensor<T> {
        let plain = value.detach();
        if !self.is_recording() {
            return plain;
        }
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            rule: Rule::Leaf,
            inputs: Vec::new(),
            input_values: Vec::new(),
            value: plain.clone(),
            grad_category,
        });
        let mut out = plain;
        out.node = Some(NodeRef { tape: self.id, index });
        out
    }

    fn position(&self, t: &Tensor<T>) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::ForeignTape),
        }
    }

    /// Evaluate `kind` on `inputs`, appending a node when recording.
    pub fn record(&self, kind: OpKind<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let positions = inputs.iter().map(|t| self.position(t)).collect::<Result<Vec<_>>>()?;
        let (shape, data) = ops::forward(&kind, inputs)?;
        let mut out = Tensor::raw(shape, data);
        if self.is_recording() && positions.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            let index = nodes.len();
            nodes.push(Node {
                rule: Rule::Op(kind),
                inputs: positions,
                input_values: inputs.iter().map(|t| t.detach()).collect(),
                value: out.clone(),
                grad_category: None,
            });
            out.node = Some(NodeRef { tape: self.id, index });
        }
        Ok(out)
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn add_bias(&self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::AddBias, &[x, bias])
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn scale(&self, x: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
        self.record(OpKind::Scale(factor), &[x])
    }

    pub fn relu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Relu, &[x])
    }

    pub fn tanh(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Tanh, &[x])
    }

    pub fn row_softmax(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::RowSoftmax, &[x])
    }

    pub fn row_log_softmax(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::RowLogSoftmax, &[x])
    }

    pub fn log(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Log, &[x])
    }

    pub fn exp(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Exp, &[x])
    }

    pub fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Sum, &[x])
    }

    pub fn mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Mean, &[x])
    }

    pub fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::Transpose, &[x])
    }

    pub fn concat_rows(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.record(OpKind::ConcatRows, parts)
    }

    pub fn index_rows(&self, x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
        self.record(OpKind::IndexRows(rows.to_vec()), &[x])
    }

    pub fn dot_matrix(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.record(OpKind::DotMatrix, &[a, b])
    }

    pub fn pick(&self, x: &Tensor<T>, cols: &[usize]) -> Result<Tensor<T>> {
        self.record(OpKind::Pick(cols.to_vec()), &[x])
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.record(OpKind::Reshape(shape.to_vec()), &[x])
    }

    /// Reverse pass from a scalar node with unit seed.
    pub fn backward(&self, seed: &Tensor<T>) -> Result<()> {
        if seed.node.is_some() && seed.numel() != 1 {
            return Err(Error::NonScalarSeed(seed.shape().to_vec()));
        }
        self.backward_vjp(seed, &Tensor::full(seed.shape(), T::one()))
    }

    /// Reverse pass from `output` seeded with an arbitrary upstream gradient
    /// of the same shape (a vector-Jacobian product).
    pub fn backward_vjp(&self, output: &Tensor<T>, upstream: &Tensor<T>) -> Result<()> {
        let seed = self.position(output)?.ok_or(Error::NoGraph)?;
        if upstream.shape() != output.shape() {
            return Err(Error::shape(
                "backward",
                format!("upstream {:?} for output {:?}", upstream.shape(), output.shape()),
            ));
        }
        if self.grads.borrow().is_some() {
            return Err(Error::GradsNotReset);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[seed] = Some(self.grad_buffer(&nodes[seed], upstream.data().to_vec()));

        for k in (0..=seed).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &nodes[k];
            if let Rule::Op(kind) = &node.rule {
                for (which, input) in node.inputs.iter().enumerate() {
                    let Some(i) = *input else { continue };
                    let contrib = ops::backward(kind, &node.input_values, &node.value, g.data(), which);
                    match grads[i].as_mut() {
                        Some(acc) => {
                            let dst = acc.data_mut().expect("gradient accumulator is unique");
                            for (d, c) in dst.iter_mut().zip(contrib) {
                                *d += c;
                            }
                        }
                        None => grads[i] = Some(self.grad_buffer(&nodes[i], contrib)),
                    }
                }
            }
            grads[k] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    fn grad_buffer(&self, node: &Node<T>, data: Vec<T>) -> Tensor<T> {
        let cat = node
            .grad_category
            .or_else(|| node.value.category())
            .unwrap_or_else(memtrace::current_category);
        memtrace::in_category(cat, || Tensor::raw(node.value.shape().to_vec(), data))
    }

    /// Gradient accumulated for `t`; zeros when `t` was not reached.
    pub fn grad(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.position(t)?.ok_or(Error::NoGraph)?;
        let grads = self.grads.borrow();
        let grads = grads.as_ref().ok_or(Error::NoGraph)?;
        match &grads[i] {
            Some(g) => Ok(g.clone()),
            None => {
                let nodes = self.nodes.borrow();
                Ok(self.grad_buffer(&nodes[i], vec![T::zero(); t.numel()]))
            }
        }
    }

    /// Remove and return the gradient of `t`, leaving zero in its place.
    pub fn take_grad(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.position(t)?.ok_or(Error::NoGraph)?;
        let taken = {
            let mut grads = self.grads.borrow_mut();
            grads.as_mut().ok_or(Error::NoGraph)?[i].take()
        };
        match taken {
            Some(g) => Ok(g),
            None => {
                let nodes = self.nodes.borrow();
                Ok(self.grad_buffer(&nodes[i], vec![T::zero(); t.numel()]))
            }
        }
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Inputs of node `index`, for checking topological order.
    pub fn node_inputs(&self, index: usize) -> Vec<usize> {
        self.nodes.borrow()[index].inputs.iter().flatten().copied().collect()
    }
}
