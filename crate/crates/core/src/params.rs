//! Named parameter storage and per-pass binding onto a tape.

use std::cell::RefCell;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter tensors. Insertion order is the canonical
/// order used by the optimizer and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Parameters bound as leaves of one tape.
///
/// In initialization mode, layers may replace a binding with freshly
/// computed values (data-dependent init); the replacements are collected and
/// written back by [`Binding::take_updates`].
pub struct Binding<'t> {
    tape: &'t Tape,
    vars: RefCell<Vec<Var<'t>>>,
    init: bool,
    updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Binding<'t> {
    /// Binds every parameter as a gradient-tracking leaf.
    pub fn trainable(store: &ParamStore, tape: &'t Tape) -> Self {
        Self::build(store, tape, true, false)
    }

    /// Binds every parameter as a constant (evaluation / sampling).
    pub fn frozen(store: &ParamStore, tape: &'t Tape) -> Self {
        Self::build(store, tape, false, false)
    }

    /// Constant binding that permits data-dependent initialization.
    pub fn initializing(store: &ParamStore, tape: &'t Tape) -> Self {
        Self::build(store, tape, false, true)
    }

    fn build(store: &ParamStore, tape: &'t Tape, grad: bool, init: bool) -> Self {
        let vars = store.values.iter().map(|v| tape.leaf(v.clone(), grad)).collect();
        Self {
            tape,
            vars: RefCell::new(vars),
            init,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars.borrow()[id.0]
    }

    pub fn is_initializing(&self) -> bool {
        self.init
    }

    /// Rebinds `id` to `value` and records it for write-back.
    pub(crate) fn initialize(&self, id: ParamId, value: Tensor) {
        let v = self.tape.constant(value.clone());
        self.vars.borrow_mut()[id.0] = v;
        self.updates.borrow_mut().push((id, value));
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients in store order, zero-filled for unused parameters.
    pub fn grads(&self, grads: &Grads) -> Vec<Tensor> {
        self.vars.borrow().iter().map(|&v| grads.wrt(v)).collect()
    }
}
