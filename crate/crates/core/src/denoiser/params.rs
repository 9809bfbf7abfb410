//! Named parameter storage, the declarative parameter inventory, and binding
//! of a store onto an autodiff tape.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How a freshly declared tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize<T: Real, R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, T::one()),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(&self.shape, |_| T::lit(rng.gen_range(-bound..bound)))
            }
            Init::Uniform(bound) => Tensor::from_fn(&self.shape, |_| T::lit(rng.gen_range(-bound..bound))),
        }
    }
}

/// Accumulates [`ParamSpec`]s under a dotted name prefix.
pub(crate) struct Decl<'a> {
    specs: &'a mut Vec<ParamSpec>,
    prefix: String,
}

impl<'a> Decl<'a> {
    pub(crate) fn root(specs: &'a mut Vec<ParamSpec>, prefix: &str) -> Self {
        Self {
            specs,
            prefix: prefix.to_string(),
        }
    }

    pub(crate) fn sub(&mut self, name: &str) -> Decl<'_> {
        Decl {
            specs: self.specs,
            prefix: join(&self.prefix, name),
        }
    }

    pub(crate) fn tensor(&mut self, name: &str, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name: join(&self.prefix, name),
            shape: shape.to_vec(),
            init,
        });
    }

    pub(crate) fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool, zero: bool) {
        let mut d = self.sub(name);
        let init = if zero { Init::Zeros } else { Init::FanIn(input) };
        d.tensor("weight", &[output, input], init);
        if bias {
            d.tensor("bias", &[output], Init::Zeros);
        }
    }

    pub(crate) fn conv(&mut self, name: &str, cin: usize, cout: usize, k: (usize, usize), zero: bool) {
        let mut d = self.sub(name);
        let init = if zero { Init::Zeros } else { Init::FanIn(cin * k.0 * k.1) };
        d.tensor("weight", &[cout, cin, k.0, k.1], init);
        d.tensor("bias", &[cout], Init::Zeros);
    }

    pub(crate) fn norm(&mut self, name: &str, channels: usize) {
        let mut d = self.sub(name);
        d.tensor("weight", &[channels], Init::Ones);
        d.tensor("bias", &[channels], Init::Zeros);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Learnable tensors keyed by dotted name, iterated in sorted order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Outcome of filling a store from a partial source (stage-1 -> stage-2).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CoverageReport {
    pub restored: Vec<String>,
    pub initialized: Vec<String>,
    /// Names present in the source that the target architecture does not use.
    pub unused: Vec<String>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let tensors = specs
            .iter()
            .map(|s| (s.name.clone(), s.materialize(rng)))
            .collect();
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that every spec is present with the declared shape.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self
                .tensors
                .get(&s.name)
                .ok_or_else(|| Error::MissingParam(s.name.clone()))?;
            t.expect_shape(&s.shape, &s.name)?;
        }
        Ok(())
    }

    /// Builds a store for `specs`, copying tensors from `self` where the name
    /// and shape match and initializing the rest from `rng`.
    pub fn restore_into<R: Rng>(&self, specs: &[ParamSpec], rng: &mut R) -> Result<(Self, CoverageReport)> {
        let mut out = Self::new();
        let mut report = CoverageReport::default();
        for s in specs {
            match self.tensors.get(&s.name) {
                Some(t) => {
                    t.expect_shape(&s.shape, &s.name)?;
                    out.insert(s.name.clone(), t.clone());
                    report.restored.push(s.name.clone());
                }
                None => {
                    out.insert(s.name.clone(), s.materialize(rng));
                    report.initialized.push(s.name.clone());
                }
            }
        }
        report.unused = self
            .tensors
            .keys()
            .filter(|k| !out.tensors.contains_key(*k))
            .cloned()
            .collect();
        Ok((out, report))
    }

    /// Adds uniform noise to every entry, activating zero-initialized layers.
    pub fn perturb<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v += T::lit(rng.gen_range(-scale..scale));
            }
        }
    }
}

/// A store bound onto a tape: one leaf per tensor.
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    /// Registers every tensor; those accepted by `trainable` track gradients.
    pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParameterStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A view of [`ParamVars`] under a name prefix.
#[derive(Clone)]
pub(crate) struct Scope<'a> {
    vars: &'a ParamVars,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub(crate) fn root(vars: &'a ParamVars, prefix: &str) -> Self {
        Self {
            vars,
            prefix: prefix.to_string(),
        }
    }

    pub(crate) fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            vars: self.vars,
            prefix: join(&self.prefix, name),
        }
    }

    /// Stores are validated against their specs before any forward pass, so a
    /// miss here is an architecture bug.
    pub(crate) fn get(&self, name: &str) -> Var {
        let full = join(&self.prefix, name);
        self.vars
            .get(&full)
            .unwrap_or_else(|| panic!("parameter `{full}` not bound"))
    }

    pub(crate) fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(&join(&self.prefix, name))
    }
}
