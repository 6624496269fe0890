//! Tape of recorded operations and reverse-mode differentiation.
//!
//! Backward rules are written with the same [`Var`] operations as the forward
//! pass. When [`Graph::grad`] runs with `create_graph = true` the backward pass
//! is itself recorded, so gradients can be differentiated again.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Backward rule: `(upstream gradient, inputs, output) -> input gradients`.
pub(crate) type BackwardFn = Rc<dyn Fn(&Var, &[Var], &Var) -> Vec<Option<Var>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

struct Inner {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<usize>,
}

/// A computation tape. Cloning shares the same tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<Inner>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// A value recorded on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(Inner { nodes: RefCell::new(Vec::new()), no_grad: Cell::new(0) }),
        }
    }

    /// A tape on which nothing is ever differentiable. Forward-only work
    /// (evaluation, feature extraction) records no backward rules.
    pub fn inference() -> Self {
        let g = Self::new();
        g.inner.no_grad.set(1);
        g
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn grad_enabled(&self) -> bool {
        self.inner.no_grad.get() == 0
    }

    /// Run `f` with gradient recording disabled.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        self.inner.no_grad.set(self.inner.no_grad.get() + 1);
        let out = f();
        self.inner.no_grad.set(self.inner.no_grad.get() - 1);
        out
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self.clone(), id: nodes.len() - 1 }
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled();
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad })
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad: false })
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Var, &[Var], &Var) -> Vec<Option<Var>> + 'static,
    ) -> Var {
        for v in inputs {
            assert!(Rc::ptr_eq(&v.graph.inner, &self.inner), "vars from different graphs");
        }
        let requires_grad = self.grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        if requires_grad {
            self.push(Node {
                value,
                parents: inputs.iter().map(|v| v.id).collect(),
                backward: Some(Rc::new(backward)),
                requires_grad,
            })
        } else {
            self.push(Node { value, parents: Vec::new(), backward: None, requires_grad: false })
        }
    }

    fn var(&self, id: usize) -> Var {
        Var { graph: self.clone(), id }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Inputs that `output` does not depend on receive zeros. With
    /// `create_graph` the returned gradients are themselves differentiable.
    pub fn grad(&self, output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
        assert_eq!(output.value().numel(), 1, "grad: output must be a scalar");
        let n = output.id + 1;
        let mut needed = vec![false; n];
        for w in wrt {
            if w.id < n {
                needed[w.id] = true;
            }
        }
        {
            let nodes = self.inner.nodes.borrow();
            for i in 0..n {
                if !needed[i] && nodes[i].requires_grad {
                    needed[i] = nodes[i].parents.iter().any(|&p| needed[p]);
                }
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if needed[output.id] {
            let seed = Tensor::ones(output.value().shape());
            grads[output.id] = Some(self.constant(seed));
        }

        let mut run = || {
            for i in (0..n).rev() {
                if !needed[i] {
                    continue;
                }
                let Some(upstream) = grads[i].clone() else { continue };
                let (rule, parents) = {
                    let nodes = self.inner.nodes.borrow();
                    match &nodes[i].backward {
                        Some(rule) => (Rc::clone(rule), nodes[i].parents.clone()),
                        None => continue,
                    }
                };
                let inputs: Vec<Var> = parents.iter().map(|&p| self.var(p)).collect();
                let out = self.var(i);
                let input_grads = rule(&upstream, &inputs, &out);
                for (p, g) in parents.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !needed[*p] {
                        continue;
                    }
                    grads[*p] = Some(match grads[*p].take() {
                        Some(acc) => acc.add(&g),
                        None => g,
                    });
                }
            }
        };
        if create_graph {
            run();
        } else {
            self.no_grad(run);
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).cloned().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect()
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.inner.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        self.graph.constant(self.value())
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }
}
