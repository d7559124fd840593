use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Grads, Graph, Tensor, Var};

/// Named parameter tensors, kept in insertion order.
#[derive(Clone, Default, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Insert or replace a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = Rc::new(value),
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(Rc::new(value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &*self.values[i])
    }

    pub fn get_rc(&self, name: &str) -> Option<Rc<Tensor>> {
        self.index.get(name).map(|&i| self.values[i].clone())
    }

    /// Mutable access; copies the tensor if a live graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(Rc::make_mut(&mut self.values[i]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data: Vec<f64> = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
        self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"));
    }

    /// Kaiming-uniform style init with bound `1/sqrt(fan_in)`.
    pub fn uniform_fan_in<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound");
        let data: Vec<f64> = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
        self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"));
    }
}

/// Binds a [`ParamStore`] to a [`Graph`], creating each leaf at most once.
pub struct Bindings<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    bound: RefCell<Vec<(String, Var<'g>)>>,
    lookup: RefCell<HashMap<String, Var<'g>>>,
    frozen: bool,
}

impl<'g, 's> Bindings<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self { graph, store, bound: RefCell::default(), lookup: RefCell::default(), frozen: false }
    }

    /// Parameters enter the graph as constants; nothing is differentiated.
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self { frozen: true, ..Self::new(graph, store) }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.lookup.borrow().get(name) {
            return *v;
        }
        let rc = self.store.get_rc(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = if self.frozen { self.graph.constant_rc(rc) } else { self.graph.leaf(rc) };
        self.lookup.borrow_mut().insert(name.to_string(), v);
        self.bound.borrow_mut().push((name.to_string(), v));
        v
    }

    /// Gradients for every parameter touched on this graph.
    pub fn gradients(&self, grads: &mut Grads) -> Vec<(String, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect()
    }
}
