//! Named trainable parameters and their binding into a per-step graph.

use crate::tensor::{Graph, Scalar, Tensor, Var};
use std::cell::RefCell;
use std::collections::HashMap;

/// A named, trainable tensor owned by a layer or model.
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param { name: name.into(), value: value.with_grad() }
    }
}

/// Inserts parameters into a graph exactly once per forward pass and maps
/// them back to their gradients by name after `backward`.
pub struct Binder<'g, T: Scalar> {
    graph: &'g Graph<T>,
    ids: RefCell<HashMap<String, usize>>,
}

impl<'g, T: Scalar> Binder<'g, T> {
    pub fn new(graph: &'g Graph<T>) -> Self {
        Binder { graph, ids: RefCell::new(HashMap::new()) }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Returns the leaf for this parameter, inserting it on first use.
    pub fn bind(&self, p: &Param<T>) -> Var<'g, T> {
        let mut ids = self.ids.borrow_mut();
        if let Some(&id) = ids.get(&p.name) {
            return self.graph.var_from_id(id);
        }
        let v = self.graph.leaf(p.value.clone());
        ids.insert(p.name.clone(), v.id());
        v
    }

    /// Gradient accumulated for a bound parameter, if any.
    pub fn grad_of(&self, p: &Param<T>) -> Option<Tensor<T>> {
        let ids = self.ids.borrow();
        ids.get(&p.name).and_then(|&id| self.graph.grad_by_id(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_cached_by_name() {
        let g: Graph<f64> = Graph::new();
        let b = Binder::new(&g);
        let p = Param::new("w", Tensor::new([2], vec![1.0, 2.0]));
        let v1 = b.bind(&p);
        let v2 = b.bind(&p);
        assert_eq!(v1.id(), v2.id(), "same name must bind to one leaf");
    }

    #[test]
    fn gradients_flow_back_by_name() {
        let g: Graph<f64> = Graph::new();
        let b = Binder::new(&g);
        let p = Param::new("w", Tensor::new([2], vec![3.0, -1.0]));
        let v = b.bind(&p);
        g.backward((v * v).sum_all()).unwrap();
        let grad = b.grad_of(&p).unwrap();
        assert_eq!(grad.data(), &[6.0, -2.0]);
    }
}
