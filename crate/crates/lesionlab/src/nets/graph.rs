//! Minimal tape-based reverse-mode autodiff over `ndarray` arrays.
//!
//! A `Graph` records forward values and per-node backward closures. Leaves
//! borrow their arrays (parameter stores are never cloned into the tape), op
//! nodes own their outputs. `backward` walks the tape once in reverse,
//! accumulating gradients and freeing intermediate buffers as it goes.
//! Everything is f64 and single-threaded, so replays are bit-identical.

use ndarray::ArrayD;
use std::borrow::Cow;

/// Handle to a node in the tape. Valid only for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<'a> = Box<dyn Fn(&[Cow<'a, ArrayD<f64>>], &ArrayD<f64>, &mut Grads) + 'a>;

/// Gradient slots indexed by node id; `None` until a gradient arrives.
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Accumulates `g` into the slot for node `id`.
    pub fn add(&mut self, id: usize, g: ArrayD<f64>) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Removes and returns the gradient of `v`, if any reached it.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.slots[v.0].take()
    }
}

pub struct Graph<'a> {
    vals: Vec<Cow<'a, ArrayD<f64>>>,
    backs: Vec<Option<BackFn<'a>>>,
    needs: Vec<bool>,
    recording: bool,
}

impl<'a> Graph<'a> {
    /// Graph that records backward closures for training.
    pub fn recording() -> Graph<'a> {
        Graph { vals: Vec::new(), backs: Vec::new(), needs: Vec::new(), recording: true }
    }

    /// Graph for inference: same forward math, no tape.
    pub fn inference() -> Graph<'a> {
        Graph { vals: Vec::new(), backs: Vec::new(), needs: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Borrowed leaf. `needs_grad` marks trainable parameters.
    pub fn leaf(&mut self, arr: &'a ArrayD<f64>, needs_grad: bool) -> Var {
        self.vals.push(Cow::Borrowed(arr));
        self.backs.push(None);
        self.needs.push(needs_grad && self.recording);
        Var(self.vals.len() - 1)
    }

    /// Owned leaf (batch tensors built on the fly).
    pub fn leaf_owned(&mut self, arr: ArrayD<f64>, needs_grad: bool) -> Var {
        self.vals.push(Cow::Owned(arr));
        self.backs.push(None);
        self.needs.push(needs_grad && self.recording);
        Var(self.vals.len() - 1)
    }

    pub fn val(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.val(v);
        debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().expect("scalar node")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Pushes an op node. `parents` determines whether a backward closure is
    /// kept: nodes with no grad-requiring ancestor carry no tape entry.
    pub fn push(
        &mut self,
        val: ArrayD<f64>,
        parents: &[Var],
        back: impl Fn(&[Cow<'a, ArrayD<f64>>], &ArrayD<f64>, &mut Grads) + 'a,
    ) -> Var {
        let needs = self.recording && parents.iter().any(|p| self.needs[p.0]);
        self.vals.push(Cow::Owned(val));
        self.backs.push(if needs { Some(Box::new(back)) } else { None });
        self.needs.push(needs);
        Var(self.vals.len() - 1)
    }

    /// Reverse pass from a scalar root. Returns gradients for every leaf on
    /// a grad path; intermediate gradients are freed during the sweep.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(self.recording, "backward on an inference graph");
        assert_eq!(self.val(root).len(), 1, "backward root must be scalar");
        let mut grads = Grads { slots: vec![None; self.vals.len()] };
        let seed = ArrayD::ones(self.val(root).raw_dim());
        grads.add(root.0, seed);
        for id in (0..=root.0).rev() {
            if self.backs[id].is_none() {
                continue;
            }
            let Some(g) = grads.slots[id].take() else { continue };
            let back = self.backs[id].as_ref().expect("checked above");
            back(&self.vals, &g, &mut grads);
        }
        grads
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }
}
