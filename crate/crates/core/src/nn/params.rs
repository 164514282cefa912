use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Non-trainable entries are buffers (e.g. running statistics).
    pub trainable: bool,
}

/// Named, ordered collection of tensors belonging to one network.
///
/// Enumeration order is insertion order and never changes. A frozen set
/// rejects optimizer steps and buffer updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    label: String,
    entries: Vec<ParamEntry>,
    frozen: bool,
}

/// Immutable deep copy of a [`ParamSet`]'s values.
#[derive(Clone, Debug)]
pub struct ParamSnapshot(Vec<Tensor>);

impl ParamSet {
    pub fn new(label: impl Into<String>) -> Self {
        ParamSet {
            label: label.into(),
            entries: Vec::new(),
            frozen: false,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        debug_assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot(self.entries.iter().map(|e| e.value.clone()).collect())
    }

    /// Bit-exact comparison against a snapshot.
    pub fn equals(&self, snap: &ParamSnapshot) -> bool {
        self.entries.len() == snap.0.len()
            && self
                .entries
                .iter()
                .zip(&snap.0)
                .all(|(e, s)| e.value.bit_eq(s))
    }

    /// Mutable access for optimizers; fails on a frozen set.
    pub fn value_mut(&mut self, idx: usize) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::Frozen(self.label.clone()));
        }
        Ok(&mut self.entries[idx].value)
    }

    /// Replaces a buffer (non-trainable entry). Frozen sets are left as is.
    pub fn update_buffer(&mut self, idx: usize, value: Tensor) -> Result<()> {
        let e = &mut self.entries[idx];
        if e.trainable {
            return Err(Error::InvalidInput(format!(
                "`{}` is trainable, not a buffer",
                e.name
            )));
        }
        if e.value.shape() != value.shape() {
            return Err(Error::shape(e.value.shape(), value.shape()));
        }
        if !self.frozen {
            e.value = value;
        }
        Ok(())
    }

    /// Copies values from `other`, checking names and shapes entry by entry.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "`{}` has {} entries, archive has {}",
                self.label,
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: `{}` {:?} vs `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_detects_single_bit_change() {
        let mut p = ParamSet::new("g");
        p.push("w", Tensor::full([1, 1, 2, 2], 0.25), true);
        let snap = p.snapshot();
        assert!(p.equals(&snap));
        let v = p.value_mut(0).unwrap();
        v.data_mut()[3] = f64::from_bits(0.25f64.to_bits() + 1);
        assert!(!p.equals(&snap));
    }

    #[test]
    fn frozen_set_rejects_mutation_and_ignores_buffers() {
        let mut p = ParamSet::new("s");
        p.push("w", Tensor::zeros([1, 1, 1, 1]), true);
        let b = p.push("running_mean", Tensor::zeros([1, 1, 1, 1]), false);
        p.freeze();
        assert!(matches!(p.value_mut(0), Err(Error::Frozen(_))));
        p.update_buffer(b, Tensor::full([1, 1, 1, 1], 3.0)).unwrap();
        assert_eq!(p.value(b).data()[0], 0.0);
        p.unfreeze();
        p.update_buffer(b, Tensor::full([1, 1, 1, 1], 3.0)).unwrap();
        assert_eq!(p.value(b).data()[0], 3.0);
    }
}
