//! Tape wrapper that binds named parameter blocks to graph leaves.
//!
//! Component builders ask for parameters by name; each name is bound to one
//! leaf per graph, so a block used by several layers accumulates one combined
//! gradient. After `backward`, [`ModelGraph::grads`] collects gradients for
//! every bound block, keyed by name, ready for the optimizer.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::params::{Gradients, ParamStore};

pub struct ModelGraph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

impl<'a> ModelGraph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        ModelGraph {
            tape: Tape::new(),
            store,
            bound: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Leaf for the named parameter block (bound once per graph).
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.by_name.get(name) {
            return *v;
        }
        let var = self.tape.leaf(self.store.get(name).clone());
        self.bound.push((name.to_string(), var));
        self.by_name.insert(name.to_string(), var);
        var
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Run the reverse sweep from `root`.
    pub fn backward(&mut self, root: Var) {
        self.tape.backward(root);
    }

    /// Gradients of every bound parameter block after `backward`.
    pub fn grads(&self) -> Gradients {
        let mut grads = Gradients::new();
        for (name, var) in &self.bound {
            grads.accumulate(name, self.tape.grad(*var));
        }
        grads
    }

    /// Gradient of one named block (zeros if the name was never bound or the
    /// block is unreachable from the backward root).
    pub fn grad_of(&self, name: &str) -> ndarray::ArrayD<f64> {
        match self.by_name.get(name) {
            Some(var) => self.tape.grad(*var),
            None => ndarray::ArrayD::zeros(self.store.get(name).raw_dim()),
        }
    }
}
