use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::{Graph, Scalar, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<S> {
    name: String,
    tensor: Tensor<S>,
    trainable: bool,
}

/// Named, ordered collection of model weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return contract(format!("duplicate parameter name {name}"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of the selected
    /// parameters.
    pub fn checksum(&self, filter: impl Fn(&str, bool) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::new();
        for e in self.entries.iter().filter(|e| filter(&e.name, e.trainable)) {
            buf.clear();
            for &v in e.tensor.data() {
                v.write_le(&mut buf);
            }
            for b in e.name.bytes().chain(buf.iter().copied()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Overwrites weights from `(name, tensor)` pairs; every parameter must be
    /// present with its exact shape.
    pub fn load_named<'a>(&mut self, items: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in items {
            let Some(&i) = self.index.get(name) else { continue };
            if self.entries[i].tensor.shape() != t.shape() {
                return contract(format!(
                    "parameter {name}: shape {:?} vs stored {:?}",
                    t.shape(),
                    self.entries[i].tensor.shape()
                ));
            }
            self.entries[i].tensor = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return contract(format!("parameter {} missing", self.entries[i].name));
        }
        Ok(())
    }
}

enum GraphSlot<'a, S> {
    Owned(Graph<S>),
    Borrowed(&'a Graph<S>),
}

/// A graph bound to a parameter store. Parameters are inserted as leaves on
/// first use; frozen parameters (and all parameters when gradients are not
/// tracked) enter as constants. Dereferences to the underlying [`Graph`].
pub struct Session<'a, S: Scalar> {
    graph: GraphSlot<'a, S>,
    store: &'a ParamStore<S>,
    bound: RefCell<HashMap<usize, Var>>,
    track: bool,
}

impl<'a, S: Scalar> std::ops::Deref for Session<'a, S> {
    type Target = Graph<S>;

    fn deref(&self) -> &Graph<S> {
        match &self.graph {
            GraphSlot::Owned(g) => g,
            GraphSlot::Borrowed(g) => g,
        }
    }
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self::with_tracking(store, true)
    }

    /// Session for pure inference.
    pub fn inference(store: &'a ParamStore<S>) -> Self {
        Self::with_tracking(store, false)
    }

    fn with_tracking(store: &'a ParamStore<S>, track: bool) -> Self {
        Self {
            graph: GraphSlot::Owned(Graph::new()),
            store,
            bound: RefCell::new(HashMap::new()),
            track,
        }
    }

    /// Session over a caller-owned graph where parameter `i` is already
    /// represented by `vars[i]`.
    pub fn prebound(graph: &'a Graph<S>, store: &'a ParamStore<S>, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return contract(format!("{} vars for {} parameters", vars.len(), store.len()));
        }
        Ok(Self {
            graph: GraphSlot::Borrowed(graph),
            store,
            bound: RefCell::new(vars.iter().copied().enumerate().collect()),
            track: false,
        })
    }

    pub fn graph(&self) -> &Graph<S> {
        self
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id.0) {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.track && self.store.is_trainable(id) {
            self.graph().leaf(t)
        } else {
            self.graph().constant(t)
        };
        self.bound.borrow_mut().insert(id.0, v);
        v
    }

    /// Gradients for every parameter, indexed by [`ParamId::index`]. `None`
    /// marks parameters not bound in this session or frozen.
    pub fn grads(&self, loss: Var) -> Result<Vec<Option<Tensor<S>>>> {
        let mut gr = self.graph().backward(loss)?;
        let mut out = vec![None; self.store.len()];
        for (&pid, &v) in self.bound.borrow().iter() {
            if self.track && self.store.is_trainable(ParamId(pid)) {
                out[pid] = Some(gr.take(v));
            }
        }
        Ok(out)
    }
}
