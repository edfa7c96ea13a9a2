//! Dynamic tape: operations append nodes in execution order, backward
//! replays them in exact reverse order.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) type BackFn<F> = Box<dyn Fn(&[F], &mut GradStore<F>) + Send>;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

struct Node<F: Real> {
    numel: usize,
    backward: Option<BackFn<F>>,
}

/// Records one forward pass. Create a fresh tape per pass; drop it to free
/// the graph. A non-recording tape runs the same ops without building a
/// graph, for inference.
pub struct Tape<F: Real> {
    id: u64,
    nodes: RefCell<Vec<Node<F>>>,
    recording: bool,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Process-unique tape identity, used to cache parameter bindings.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a differentiation root (parameter or input).
    pub fn leaf(&self, t: &Tensor<F>) -> Tensor<F> {
        let node = self.push(t.numel(), None);
        t.clone().with_node(node)
    }

    pub(crate) fn push(&self, numel: usize, backward: Option<BackFn<F>>) -> Option<usize> {
        if !self.recording {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { numel, backward });
        Some(nodes.len() - 1)
    }

    /// Record an op output: only outputs depending on a tracked input get a
    /// node, so constant subgraphs cost nothing.
    pub(crate) fn push_op(&self, tracked: bool, numel: usize, backward: BackFn<F>) -> Option<usize> {
        if tracked {
            self.push(numel, Some(backward))
        } else {
            None
        }
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// reached node; fan-out sums contributions because every consumer
    /// accumulates into the same producer buffer.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        if loss.numel() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar".to_string()));
        }
        let root = loss
            .node()
            .ok_or_else(|| Error::Numeric("backward on an untracked tensor".to_string()))?;
        let nodes = self.nodes.borrow();
        let numels: Vec<usize> = nodes.iter().map(|n| n.numel).collect();
        let mut store = GradStore {
            bufs: vec![None; nodes.len()],
            numels,
        };
        store.with_buf(root, |g| g[0] = F::one());
        for id in (0..=root).rev() {
            let Some(back) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(grad) = store.bufs[id].take() else {
                continue;
            };
            back(&grad, &mut store);
            store.bufs[id] = Some(grad);
        }
        Ok(Gradients { bufs: store.bufs })
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradient buffers being accumulated during a backward sweep.
pub struct GradStore<F: Real> {
    bufs: Vec<Option<Vec<F>>>,
    numels: Vec<usize>,
}

impl<F: Real> GradStore<F> {
    /// Accumulate into the buffer of `node` (no-op for untracked inputs).
    #[inline]
    pub(crate) fn accum(&mut self, node: Option<usize>, add: impl FnOnce(&mut [F])) {
        if let Some(id) = node {
            self.with_buf(id, add);
        }
    }

    fn with_buf(&mut self, id: usize, f: impl FnOnce(&mut [F])) {
        let buf = self.bufs[id].get_or_insert_with(|| vec![F::zero(); self.numels[id]]);
        f(buf);
    }
}

/// Result of a backward sweep.
pub struct Gradients<F: Real> {
    bufs: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss wrt `t`, if `t` was tracked and reached.
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.by_node(t.node()?)
    }

    pub fn by_node(&self, node: usize) -> Option<&[F]> {
        self.bufs.get(node)?.as_deref()
    }
}
