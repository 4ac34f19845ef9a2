use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DiffError, NdArray, Tape, Var};

/// Which part of the grounding network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleTag {
    ImageEncoder,
    TextEncoder,
    Fusion,
    Decoder,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 4] = [
        ModuleTag::ImageEncoder,
        ModuleTag::TextEncoder,
        ModuleTag::Fusion,
        ModuleTag::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::ImageEncoder => "image_encoder",
            ModuleTag::TextEncoder => "text_encoder",
            ModuleTag::Fusion => "fusion",
            ModuleTag::Decoder => "decoder",
        }
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleTag {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModuleTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| DiffError::UnknownTag(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: NdArray,
    pub grad: NdArray,
    pub frozen: bool,
    pub tag: ModuleTag,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: NdArray, tag: ModuleTag) -> Result<(), DiffError> {
        self.insert(name, value, tag, false)
    }

    pub(crate) fn insert(&mut self, name: &str, value: NdArray, tag: ModuleTag, frozen: bool) -> Result<(), DiffError> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let grad = NdArray::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad,
                frozen,
                tag,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&NdArray, DiffError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Places a parameter on the tape, reusing the node if already bound.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = tape.bound.get(name) {
            return Ok(v);
        }
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let v = tape.leaf(entry.value.clone(), !entry.frozen);
        tape.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Adds the tape's gradients into every bound, trainable parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, &var) in &tape.bound {
            if let (Some(entry), Some(g)) = (self.entries.get_mut(name), tape.grad(var)) {
                if !entry.frozen {
                    entry.grad.add_assign(g);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    /// Makes exactly the parameters carrying one of `tags` trainable.
    pub fn freeze_except(&mut self, tags: &BTreeSet<ModuleTag>) -> Result<(), DiffError> {
        let trainable = self.entries.values().filter(|e| tags.contains(&e.tag)).count();
        if trainable == 0 {
            return Err(DiffError::EmptyTrainable);
        }
        for entry in self.entries.values_mut() {
            entry.frozen = !tags.contains(&entry.tag);
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for entry in self.entries.values_mut() {
            entry.frozen = false;
        }
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|e| !e.frozen).map(|e| e.value.len()).sum()
    }

    pub fn count_for(&self, tag: ModuleTag) -> usize {
        self.entries
            .values()
            .filter(|e| e.tag == tag)
            .map(|e| e.value.len())
            .sum()
    }

    /// Fraction of scalar parameters that are currently trainable.
    pub fn trainable_share(&self) -> f64 {
        self.trainable_count() as f64 / self.total_count().max(1) as f64
    }

    /// Bitwise comparison of every parameter value carrying `tag`.
    pub fn values_bitwise_eq(&self, other: &ParamRegistry, tag: Option<ModuleTag>) -> bool {
        self.entries.iter().all(|(name, e)| {
            if tag.is_some_and(|t| t != e.tag) {
                return true;
            }
            other.entries.get(name).is_some_and(|o| e.value.bitwise_eq(&o.value))
        }) && self.entries.len() == other.entries.len()
    }
}
