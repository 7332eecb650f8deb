use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::tensor::{Real, Shape, Tensor};

/// Handle to a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
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

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|e| alloc::vec![T::zero(); e.value.data.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast() })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the f32 little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update((e.name.len() as u32).to_le_bytes());
            h.update(e.name.as_bytes());
            for d in e.value.shape.dims() {
                h.update((d as u32).to_le_bytes());
            }
            for v in &e.value.data {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<(), String> {
        if other.len() != self.len() {
            return Err(alloc::format!("expected {} tensors, found {}", self.len(), other.len()));
        }
        for e in &mut self.entries {
            let src = other
                .find(&e.name)
                .ok_or_else(|| alloc::format!("missing tensor {}", e.name))?;
            let src = other.get(src);
            if src.shape != e.value.shape {
                return Err(alloc::format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape,
                    e.value.shape
                ));
            }
            e.value.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].value.shape
    }
}

/// Lower-case hex rendering of a digest.
pub fn hex(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
