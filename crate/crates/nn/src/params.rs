use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Element;
use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named parameter and buffer tensors of one network, in declaration order.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore { uid: next_uid(), entries: self.entries.clone() }
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { uid: next_uid(), entries: Vec::new() }
    }

    /// Identity used by graphs to route gradients back to this store.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of scalar values across every entry.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Flattens every entry to `f32` in declaration order.
    pub fn to_f32_blocks(&self) -> Vec<f32> {
        self.entries.iter().flat_map(|e| e.value.to_f32_vec()).collect()
    }

    /// Inverse of [`to_f32_blocks`](Self::to_f32_blocks); returns the number of values consumed.
    pub fn load_f32_blocks(&mut self, values: &[f32]) -> Result<usize, crate::NnError> {
        let need = self.numel();
        if values.len() < need {
            return Err(crate::NnError::ParamCount { expected: need, found: values.len() });
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.numel();
            for (dst, &src) in e.value.data_mut().iter_mut().zip(&values[off..off + n]) {
                *dst = T::from_f32(src);
            }
            off += n;
        }
        Ok(need)
    }

    /// Same entries converted to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            uid: next_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
        }
    }
}
