use std::cell::RefCell;
use std::collections::HashMap;

use voxgrad::{BatchStats, Tensor, Var};

use crate::error::{Error, Result};

/// Momentum for batch-norm running averages.
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// `false` for buffers such as running statistics.
    pub trainable: bool,
}

/// Ordered, uniquely named tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, recorded for running averages.
    Train,
    /// Stored running statistics.
    Eval,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.value)
    }

    /// Removes every entry of layer `layer` (names `layer.*`).
    pub fn remove_layer(&mut self, layer: &str) -> usize {
        let prefix = format!("{layer}.");
        let before = self.entries.len();
        self.entries.retain(|e| !e.name.starts_with(&prefix));
        before - self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Wrap every tensor for one forward pass. Trainable entries become
    /// gradient leaves when `trainable` is set, constants otherwise.
    pub fn bind(&self, trainable: bool, mode: NormMode) -> Binding {
        let mut index = HashMap::new();
        let mut vars = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            index.insert(e.name.clone(), i);
            vars.push(Var::leaf(e.value.clone(), trainable && e.trainable));
        }
        Binding {
            names: self.entries.iter().map(|e| e.name.clone()).collect(),
            trainable: self.entries.iter().map(|e| e.trainable).collect(),
            index,
            vars,
            mode,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Fold batch statistics recorded during a training forward into the
    /// `running_mean` / `running_var` buffers of each layer.
    pub fn apply_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (layer, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{layer}.{suffix}");
                let running = self
                    .get_mut(&name)
                    .ok_or_else(|| Error::Usage(format!("no buffer {name}")))?;
                for (r, b) in running.data_mut().iter_mut().zip(batch.data()) {
                    *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}

/// Tape leaves for one network's parameters during one forward pass.
pub struct Binding {
    names: Vec<String>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
    vars: Vec<Var>,
    mode: NormMode,
    stats: RefCell<Vec<(String, BatchStats)>>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<&Var> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::Usage(format!("missing parameter {name}")))
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub(crate) fn record_stats(&self, layer: &str, stats: BatchStats) {
        self.stats.borrow_mut().push((layer.to_string(), stats));
    }

    pub fn take_stats(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    /// Trainable leaves in parameter-set order.
    pub fn trainable_vars(&self) -> Vec<(&str, &Var)> {
        self.names
            .iter()
            .zip(&self.vars)
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|((n, v), _)| (n.as_str(), v))
            .collect()
    }
}
