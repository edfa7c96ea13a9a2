//! Named trainable parameters and their per-tape leaf binding.

use std::sync::Mutex;

use crate::tensor::{Real, Tape, Tensor};

/// A named weight tensor. Binding it to a tape registers it as a leaf once
/// per tape, so a layer reused across timesteps accumulates its gradient
/// into a single buffer.
#[derive(Debug)]
pub struct Param<F: Real> {
    name: String,
    value: Tensor<F>,
    bound: Mutex<Option<(u64, usize)>>,
}

impl<F: Real> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param {
            name: self.name.clone(),
            value: self.value.detached(),
            bound: Mutex::new(None),
        }
    }
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Param {
            name: name.into(),
            value: value.detached(),
            bound: Mutex::new(None),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Leaf tensor for this tape (cached per tape id).
    pub fn bind(&self, tape: &Tape<F>) -> Tensor<F> {
        if !tape.is_recording() {
            return self.value.clone();
        }
        let mut bound = self.bound.lock().unwrap();
        if let Some((tid, node)) = *bound {
            if tid == tape.id() {
                return self.value.clone().with_node(Some(node));
            }
        }
        let leaf = tape.leaf(&self.value);
        *bound = Some((tape.id(), leaf.node().unwrap()));
        leaf
    }

    /// Node id on `tape` if this parameter was bound there.
    pub fn node_on(&self, tape: &Tape<F>) -> Option<usize> {
        match *self.bound.lock().unwrap() {
            Some((tid, node)) if tid == tape.id() => Some(node),
            _ => None,
        }
    }

    /// Replace the value (shape must match).
    pub fn set_data(&mut self, data: Vec<F>) {
        assert_eq!(data.len(), self.value.numel(), "param {} resize", self.name);
        let shape = self.value.shape().to_vec();
        self.value = Tensor::from_vec(data, &shape).expect("shape checked");
        *self.bound.lock().unwrap() = None;
    }

    /// In-place update through the shared buffer. Copies only if a tape from
    /// a previous step still holds the buffer.
    pub fn update(&mut self, f: impl FnOnce(&mut [F])) {
        self.value.apply_mut(f);
        *self.bound.lock().unwrap() = None;
    }
}

/// Visitor over a component's trainable parameters, in a stable order.
pub trait HasParams<F: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>));
}
