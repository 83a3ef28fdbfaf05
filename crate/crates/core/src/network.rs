//! The DBN description layer: hierarchical values, variables with declared
//! dependencies, and the validated network over them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// What a path in a [`Value`] holds: a realized tensor or a distribution that
/// the runtime will sample or score.
#[derive(Debug, Clone)]
pub enum Payload {
    Tensor(Tensor),
    Field(Distribution),
}

impl From<Tensor> for Payload {
    fn from(t: Tensor) -> Self {
        Payload::Tensor(t)
    }
}

impl From<Distribution> for Payload {
    fn from(d: Distribution) -> Self {
        Payload::Field(d)
    }
}

/// A dot-path keyed map of payloads.
#[derive(Debug, Clone, Default)]
pub struct Value {
    fields: BTreeMap<String, Payload>,
}

/// Result of [`Value::get`]: an exact entry or the sub-value under a prefix.
#[derive(Debug, Clone)]
pub enum Entry<'a> {
    Leaf(&'a Payload),
    Node(Value),
}

impl Value {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insert; panics on a duplicate path, which is a
    /// programming error in story code. Use [`Value::insert`] to handle it.
    pub fn with(mut self, path: &str, payload: impl Into<Payload>) -> Self {
        if let Err(e) = self.insert(path, payload) {
            panic!("{e}");
        }
        self
    }

    pub fn insert(&mut self, path: &str, payload: impl Into<Payload>) -> Result<()> {
        if self.fields.contains_key(path) {
            return Err(Error::DuplicatePath(path.to_string()));
        }
        self.fields.insert(path.to_string(), payload.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Payload)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.fields.contains_key(path)
    }

    /// Exact entry at `path`, or the sub-value of every path under `path.`.
    pub fn get(&self, path: &str) -> Result<Entry<'_>> {
        if let Some(p) = self.fields.get(path) {
            return Ok(Entry::Leaf(p));
        }
        let sub = self.strip_prefix(path);
        if sub.is_empty() {
            Err(self.missing(path))
        } else {
            Ok(Entry::Node(sub))
        }
    }

    /// The sub-value under `prefix`.
    pub fn get_value(&self, prefix: &str) -> Result<Value> {
        match self.get(prefix)? {
            Entry::Node(v) => Ok(v),
            Entry::Leaf(_) => Err(Error::invalid(
                "get_value",
                format!("`{prefix}` is a leaf, not a prefix"),
            )),
        }
    }

    /// The realized tensor at `path`.
    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        match self.fields.get(path) {
            Some(Payload::Tensor(t)) => Ok(t),
            Some(Payload::Field(d)) => Err(Error::invalid(
                "tensor",
                format!("`{path}` holds an unsampled {} field", d.family()),
            )),
            None => Err(self.missing(path)),
        }
    }

    /// The distribution at `path`.
    pub fn field(&self, path: &str) -> Result<&Distribution> {
        match self.fields.get(path) {
            Some(Payload::Field(d)) => Ok(d),
            Some(Payload::Tensor(_)) => Err(Error::invalid("field", format!("`{path}` holds a plain tensor"))),
            None => Err(self.missing(path)),
        }
    }

    /// Combines two values with disjoint paths.
    pub fn union(mut self, other: Value) -> Result<Value> {
        for (k, v) in other.fields {
            if self.fields.contains_key(&k) {
                return Err(Error::DuplicatePath(k));
            }
            self.fields.insert(k, v);
        }
        Ok(self)
    }

    /// Maps every path `q` to `prefix.q`.
    pub fn prefixed_with(&self, prefix: &str) -> Value {
        Value {
            fields: self
                .fields
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }

    fn strip_prefix(&self, prefix: &str) -> Value {
        let dotted = format!("{prefix}.");
        Value {
            fields: self
                .fields
                .range(dotted.clone()..)
                .take_while(|(k, _)| k.starts_with(&dotted))
                .map(|(k, v)| (k[dotted.len()..].to_string(), v.clone()))
                .collect(),
        }
    }

    fn missing(&self, path: &str) -> Error {
        let mut scored: Vec<(f64, &str)> = self
            .fields
            .keys()
            .map(|k| (strsim::jaro_winkler(path, k), k.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        Error::MissingPath {
            path: path.to_string(),
            nearest: scored.into_iter().take(3).map(|(_, k)| k.to_string()).collect(),
        }
    }

    /// Replaces every payload by the output of `f`, keeping paths.
    pub fn try_map(&self, mut f: impl FnMut(&str, &Payload) -> Result<Payload>) -> Result<Value> {
        let mut fields = BTreeMap::new();
        for (k, v) in &self.fields {
            fields.insert(k.clone(), f(k, v)?);
        }
        Ok(Value { fields })
    }
}

/// Whether a field holds continuous values or integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Continuous,
    /// Integers in `[0, upper)`; `None` leaves the upper end unchecked.
    Integer { upper: Option<usize> },
}

/// Declared per-row event shape and kind of one field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub shape: Vec<usize>,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn continuous(shape: impl Into<Vec<usize>>) -> Self {
        FieldSpec {
            shape: shape.into(),
            kind: FieldKind::Continuous,
        }
    }

    pub fn integer(shape: impl Into<Vec<usize>>, upper: usize) -> Self {
        FieldSpec {
            shape: shape.into(),
            kind: FieldKind::Integer { upper: Some(upper) },
        }
    }

    pub fn scalar() -> Self {
        Self::continuous([])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValueSpec {
    fields: BTreeMap<String, FieldSpec>,
}

impl ValueSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, path: &str, spec: FieldSpec) -> Self {
        self.fields.insert(path.to_string(), spec);
        self
    }

    pub fn get(&self, path: &str) -> Option<&FieldSpec> {
        self.fields.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FieldSpec)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    pub fn prefixed_with(&self, prefix: &str) -> ValueSpec {
        ValueSpec {
            fields: self
                .fields
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn union(mut self, other: ValueSpec) -> Result<ValueSpec> {
        for (k, v) in other.fields {
            if self.fields.contains_key(&k) {
                return Err(Error::DuplicatePath(k));
            }
            self.fields.insert(k, v);
        }
        Ok(self)
    }

    /// Checks that `value` has exactly the declared paths, that every realized
    /// tensor is `[batch] ++ shape`, and that integer fields hold integers in
    /// range.
    pub fn check(&self, variable: &str, step: usize, batch: usize, value: &Value) -> Result<()> {
        let violation = |path: &str, detail: String| Error::SpecViolation {
            variable: variable.to_string(),
            path: path.to_string(),
            step,
            detail,
        };
        for path in value.paths() {
            if !self.fields.contains_key(path) {
                return Err(violation(path, "path not declared in the spec".into()));
            }
        }
        for (path, spec) in &self.fields {
            let t = match value.fields.get(path) {
                Some(Payload::Tensor(t)) => t,
                Some(Payload::Field(_)) => return Err(violation(path, "field was not realized".into())),
                None => return Err(violation(path, "declared path missing from output".into())),
            };
            let mut want = vec![batch];
            want.extend_from_slice(&spec.shape);
            if t.shape() != want.as_slice() {
                return Err(violation(path, format!("shape {:?}, expected {:?}", t.shape(), want)));
            }
            if let FieldKind::Integer { upper } = spec.kind {
                let bound = upper.unwrap_or(usize::MAX);
                if let Some(x) = t
                    .data()
                    .iter()
                    .find(|x| !(**x >= 0.0 && x.fract() == 0.0 && **x < bound as f64))
                {
                    return Err(violation(path, format!("value {x} is not an integer in [0, {bound})")));
                }
            } else if !t.all_finite() {
                return Err(violation(path, "non-finite value".into()));
            }
        }
        Ok(())
    }
}

/// Trainable (or fixed) named parameters visible to builders.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Replaces an existing parameter's value.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::shape("ParamSet::set", slot.shape(), value.shape())),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// A copy whose tensors are leaves on `tape`.
    pub fn watch(&self, tape: &Tape) -> ParamSet {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v))).collect(),
        }
    }

    /// A copy with every tensor detached from its tape.
    pub fn detached(&self) -> ParamSet {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }
}

/// What a builder sees besides its dependency values.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub params: &'a ParamSet,
    pub step: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepMode {
    Current,
    Previous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dep {
    pub variable: String,
    pub mode: DepMode,
}

impl Dep {
    pub fn current(variable: &str) -> Self {
        Dep {
            variable: variable.to_string(),
            mode: DepMode::Current,
        }
    }

    pub fn previous(variable: &str) -> Self {
        Dep {
            variable: variable.to_string(),
            mode: DepMode::Previous,
        }
    }
}

pub type BuilderFn = Arc<dyn Fn(&Ctx<'_>, &[&Value]) -> Result<Value> + Send + Sync>;

/// A builder function together with its ordered dependencies.
#[derive(Clone)]
pub struct Binding {
    pub deps: Vec<Dep>,
    pub f: BuilderFn,
}

impl fmt::Debug for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Binding").field("deps", &self.deps).finish_non_exhaustive()
    }
}

/// A named component random variable.
#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub spec: ValueSpec,
    pub initial: Option<Binding>,
    pub kernel: Option<Binding>,
}

impl Variable {
    pub fn new(name: &str, spec: ValueSpec) -> Self {
        Variable {
            name: name.to_string(),
            spec,
            initial: None,
            kernel: None,
        }
    }

    pub fn initial<F>(mut self, deps: Vec<Dep>, f: F) -> Self
    where
        F: Fn(&Ctx<'_>, &[&Value]) -> Result<Value> + Send + Sync + 'static,
    {
        self.initial = Some(Binding { deps, f: Arc::new(f) });
        self
    }

    pub fn kernel<F>(mut self, deps: Vec<Dep>, f: F) -> Self
    where
        F: Fn(&Ctx<'_>, &[&Value]) -> Result<Value> + Send + Sync + 'static,
    {
        self.kernel = Some(Binding { deps, f: Arc::new(f) });
        self
    }

    /// Uses one builder for both the initial slice and the kernel. Only valid
    /// when every dependency is current-mode.
    pub fn both<F>(self, deps: Vec<Dep>, f: F) -> Self
    where
        F: Fn(&Ctx<'_>, &[&Value]) -> Result<Value> + Send + Sync + 'static,
    {
        let f: BuilderFn = Arc::new(f);
        let mut v = self;
        v.initial = Some(Binding { deps: deps.clone(), f: f.clone() });
        v.kernel = Some(Binding { deps, f });
        v
    }
}

/// A validated set of variables with their per-slice evaluation orders.
#[derive(Debug, Clone)]
pub struct Network {
    variables: Vec<Variable>,
    initial_order: Vec<usize>,
    kernel_order: Vec<usize>,
    batch: usize,
}

impl Network {
    /// Validates bindings and dependencies. `batch` is the extent of the
    /// population axis shared by every field.
    pub fn new(variables: Vec<Variable>, batch: usize) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, v) in variables.iter().enumerate() {
            if index.insert(v.name.clone(), i).is_some() {
                return Err(Error::Binding {
                    variable: v.name.clone(),
                    detail: "declared twice".into(),
                });
            }
        }
        for v in &variables {
            let (Some(init), Some(kernel)) = (&v.initial, &v.kernel) else {
                return Err(Error::Binding {
                    variable: v.name.clone(),
                    detail: "both an initial and a kernel builder must be bound".into(),
                });
            };
            for dep in init.deps.iter().chain(&kernel.deps) {
                if !index.contains_key(&dep.variable) {
                    return Err(Error::DanglingDependency {
                        variable: v.name.clone(),
                        missing: dep.variable.clone(),
                    });
                }
            }
            if let Some(dep) = init.deps.iter().find(|d| d.mode == DepMode::Previous) {
                return Err(Error::Binding {
                    variable: v.name.clone(),
                    detail: format!(
                        "initial builder depends on `{}.previous`; slice 0 has no predecessor",
                        dep.variable
                    ),
                });
            }
        }
        let edges = |pick: &dyn Fn(&Variable) -> &Binding| -> Vec<Vec<usize>> {
            variables
                .iter()
                .map(|v| {
                    pick(v)
                        .deps
                        .iter()
                        .filter(|d| d.mode == DepMode::Current)
                        .map(|d| index[&d.variable])
                        .collect()
                })
                .collect()
        };
        let initial_order = topo_order(&variables, &edges(&|v| v.initial.as_ref().unwrap()))?;
        let kernel_order = topo_order(&variables, &edges(&|v| v.kernel.as_ref().unwrap()))?;
        Ok(Network {
            variables,
            initial_order,
            kernel_order,
            batch,
        })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, name: &str) -> Result<&Variable> {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::invalid("variable", format!("no variable named `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Evaluation order (indices into [`Network::variables`]) for slice 0.
    pub fn initial_order(&self) -> &[usize] {
        &self.initial_order
    }

    /// Evaluation order for slices after the first.
    pub fn kernel_order(&self) -> &[usize] {
        &self.kernel_order
    }

    pub fn order_names(&self, initial: bool) -> Vec<&str> {
        let order = if initial { &self.initial_order } else { &self.kernel_order };
        order.iter().map(|&i| self.variables[i].name.as_str()).collect()
    }

    /// Same variables with a different population size.
    pub fn with_batch(&self, batch: usize) -> Network {
        Network {
            batch,
            ..self.clone()
        }
    }
}

/// Kahn's algorithm, always releasing the ready node declared first.
fn topo_order(variables: &[Variable], parents: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = variables.len();
    let mut indegree: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    let mut children = vec![Vec::new(); n];
    for (child, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(child);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&next) = ready.iter().next() {
        ready.remove(&next);
        order.push(next);
        for &c in &children[next] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(Error::Cycle(find_cycle(variables, parents, &indegree)))
}

/// Walks parent edges among unreleased nodes until a node repeats.
fn find_cycle(variables: &[Variable], parents: &[Vec<usize>], indegree: &[usize]) -> Vec<String> {
    let stuck = |i: usize| indegree[i] > 0;
    let start = (0..variables.len()).find(|&i| stuck(i)).expect("a stuck node");
    let mut path = vec![start];
    let mut node = start;
    loop {
        node = *parents[node].iter().find(|&&p| stuck(p)).expect("stuck node has a stuck parent");
        if let Some(pos) = path.iter().position(|&p| p == node) {
            let mut cycle: Vec<String> = path[pos..].iter().rev().map(|&i| variables[i].name.clone()).collect();
            cycle.push(cycle[0].clone());
            return cycle;
        }
        path.push(node);
    }
}
