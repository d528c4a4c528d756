use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Location of one named block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub slot: ParamSlot,
}

/// Flat parameter vector shared by every network trained with one optimizer.
///
/// Gradients produced by a [`Tape`](super::Tape) built over this store have
/// the same length and layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    values: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> ParamSlot {
        let slot = ParamSlot {
            offset: self.values.len(),
            len,
        };
        self.values.resize(self.values.len() + len, 0.0);
        self.entries.push(ParamEntry {
            name: name.into(),
            slot,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slot(&self, name: &str) -> Option<ParamSlot> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.slot)
    }

    pub fn slice(&self, slot: ParamSlot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn slice_mut(&mut self, slot: ParamSlot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    /// Replace all values, keeping the layout.
    pub fn load(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::dim(
                "ParamStore::load",
                self.values.len(),
                values.len(),
            ));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }
}
