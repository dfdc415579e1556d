//! Named, ordered parameter collections and their binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::BatchStats;
use crate::tensor::{Element, Tensor};

/// Trainable weights receive gradients; buffers (running statistics) only
/// change through explicit updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: EntryKind,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParameterSet<T> {
    fn default() -> Self {
        ParameterSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: EntryKind) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {}", name)));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            frozen: false,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::InvalidArgument(format!("unknown parameter {}", name))),
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for e in &mut self.entries {
            e.frozen = frozen;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.entries.iter().all(|e| e.frozen)
    }

    /// Total number of scalars in weight entries.
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Weight)
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, kinds, shapes and little-endian values, as hex.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            hasher.update([0u8, matches!(e.kind, EntryKind::Buffer) as u8]);
            for &d in e.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{:02x}", b))
            .collect()
    }

    /// Checks that `other` has the same names, kinds and shapes in the same order.
    pub fn check_aligned(&self, other: &ParameterSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(shape_err!(
                "parameter sets have {} and {} entries",
                self.entries.len(),
                other.entries.len()
            ));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.kind != b.kind || a.value.shape() != b.value.shape() {
                return Err(shape_err!(
                    "parameter {} {:?} does not align with {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                    frozen: e.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Exponential running-average update of batch-norm buffers:
    /// `running ← (1 - momentum)·running + momentum·batch`.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for (layer, s) in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let target = self.get_mut(&format!("{}.{}", layer, suffix))?;
                if target.len() != values.len() {
                    return Err(shape_err!("running statistics for {} have the wrong length", layer));
                }
                for (r, &b) in target.data_mut().iter_mut().zip(values) {
                    *r = *r * keep + b * m;
                }
            }
        }
        Ok(())
    }

    /// Bind every entry onto `tape`. Weights become gradient leaves when
    /// `trainable` and not frozen; everything else becomes a constant.
    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, 'p, T> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let grad = trainable && !e.frozen && e.kind == EntryKind::Weight;
                tape.leaf(e.value.clone(), grad)
            })
            .collect();
        Bound {
            tape,
            params: self,
            vars,
            stats: RefCell::new(Vec::new()),
        }
    }
}

/// A parameter set bound onto a tape for one forward/backward pass.
pub struct Bound<'t, 'p, T: Element> {
    tape: &'t Tape<T>,
    params: &'p ParameterSet<T>,
    vars: Vec<Var<'t, T>>,
    stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'t, 'p, T: Element> Bound<'t, 'p, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {}", name)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.position(name).is_some()
    }

    pub fn buffer(&self, name: &str) -> Result<&'p Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    pub(crate) fn record_stats(&self, layer: &str, stats: BatchStats<T>) {
        self.stats.borrow_mut().push((layer.to_string(), stats));
    }

    /// Batch statistics recorded by tracking batch-norm layers since binding.
    pub fn take_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    /// Gradients aligned with the parameter set's entry order.
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        ParamGrads {
            entries: self.vars.iter().map(|&v| grads.get(v).cloned()).collect(),
        }
    }
}

/// Per-entry gradients; `None` where no gradient reached the entry.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub entries: Vec<Option<Tensor<T>>>,
}

impl<T: Element> ParamGrads<T> {
    pub fn empty(len: usize) -> Self {
        ParamGrads {
            entries: vec![None; len],
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().flatten().all(|g| g.all_finite())
    }
}

/// Seeded initializer that appends layers to a parameter set.
pub struct Initializer<T: Element> {
    rng: ChaCha8Rng,
    pub params: ParameterSet<T>,
}

impl<T: Element> Initializer<T> {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParameterSet::new(),
        }
    }

    /// Convolution `name.weight` `[c_out, c_in, k, k]` drawn from
    /// `N(0, gain²·2/fan_in)` and an optional zero `name.bias`.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool, gain: f64) -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data = (0..c_out * c_in * k * k)
            .map(|_| T::of(dist.sample(&mut self.rng)))
            .collect();
        self.params.insert(
            format!("{}.weight", name),
            Tensor::from_vec(&[c_out, c_in, k, k], data)?,
            EntryKind::Weight,
        )?;
        if bias {
            self.params
                .insert(format!("{}.bias", name), Tensor::zeros(&[c_out]), EntryKind::Weight)?;
        }
        Ok(())
    }

    /// Batch norm affine parameters plus running statistics.
    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        let p = &mut self.params;
        p.insert(format!("{}.weight", name), Tensor::full(&[channels], T::one()), EntryKind::Weight)?;
        p.insert(format!("{}.bias", name), Tensor::zeros(&[channels]), EntryKind::Weight)?;
        p.insert(format!("{}.running_mean", name), Tensor::zeros(&[channels]), EntryKind::Buffer)?;
        p.insert(
            format!("{}.running_var", name),
            Tensor::full(&[channels], T::one()),
            EntryKind::Buffer,
        )?;
        Ok(())
    }

    pub fn finish(self) -> ParameterSet<T> {
        self.params
    }
}
