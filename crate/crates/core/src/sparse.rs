//! Masks, sparse vectors and dense deltas shared by training and composition.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use crate::digest::Digest;
use crate::model::{ParameterSet, TensorClass};
use crate::{Error, Result};

/// Sorted flat indices selected in one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Per-tensor index sets; tensors appear in parameter-set order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BinaryMask {
    tensors: Vec<MaskTensor>,
}

impl BinaryMask {
    /// Validates ordering and bounds.
    pub fn new(tensors: Vec<MaskTensor>) -> Result<Self> {
        for t in &tensors {
            let len: usize = t.shape.iter().product();
            check_sorted(&t.name, &t.indices, len)?;
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[MaskTensor] {
        &self.tensors
    }

    /// Total number of selected coordinates.
    pub fn k(&self) -> usize {
        self.tensors.iter().map(|t| t.indices.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&MaskTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Every named tensor exists in `params` with the same shape.
    pub fn check_against(&self, params: &ParameterSet) -> Result<()> {
        for t in &self.tensors {
            let tensor = params
                .get(&t.name)
                .ok_or_else(|| Error::Incompatible(format!("mask names unknown tensor {}", t.name)))?;
            if tensor.shape() != t.shape.as_slice() {
                return Err(Error::Incompatible(format!("mask shape mismatch for {}", t.name)));
            }
        }
        Ok(())
    }

    /// Global `(tensor position in params, flat index)` pairs, sorted.
    pub fn global_support(&self, params: &ParameterSet) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.k());
        for t in &self.tensors {
            let ti = params
                .index_of(&t.name)
                .ok_or_else(|| Error::Incompatible(format!("mask names unknown tensor {}", t.name)))?;
            out.extend(t.indices.iter().map(|&i| (ti, i)));
        }
        out.sort_unstable();
        Ok(out)
    }

    /// `(name, index)` keys, usable without a parameter set.
    pub fn keys(&self) -> Vec<(&str, usize)> {
        let mut out: Vec<(&str, usize)> = self
            .tensors
            .iter()
            .flat_map(|t| t.indices.iter().map(move |&i| (t.name.as_str(), i)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn digest(&self) -> u64 {
        let mut d = Digest::new();
        d.str("binary-mask");
        for t in &self.tensors {
            d.str(&t.name);
            for &i in &t.indices {
                d.u64(i as u64);
            }
        }
        d.finish()
    }
}

fn check_sorted(name: &str, indices: &[usize], len: usize) -> Result<()> {
    for w in indices.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Incompatible(format!(
                "indices of tensor {name} are not strictly increasing"
            )));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= len {
            return Err(Error::Incompatible(format!(
                "index {last} out of range for tensor {name} of {len} values"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VectorKind {
    Language,
    Task,
}

impl VectorKind {
    pub fn tag(self) -> u8 {
        match self {
            VectorKind::Language => 0,
            VectorKind::Task => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(VectorKind::Language),
            1 => Some(VectorKind::Task),
            _ => None,
        }
    }
}

/// Where a sparse vector came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub kind: VectorKind,
    /// Digest of the training and denoising configuration.
    pub config_digest: u64,
    pub spec_digest: u64,
    /// Digest of the pretrained parameters the vector is composed onto.
    pub base_digest: u64,
    /// Digest of the parameters training started from.
    pub init_digest: u64,
    /// Content digest of the vector applied to the base before training, if any.
    pub parent: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// A sparse fine-tuned difference vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    tensors: Vec<SparseTensor>,
    pub provenance: Provenance,
}

impl SparseVector {
    pub fn new(tensors: Vec<SparseTensor>, provenance: Provenance) -> Result<Self> {
        for t in &tensors {
            let len: usize = t.shape.iter().product();
            check_sorted(&t.name, &t.indices, len)?;
            if t.indices.len() != t.values.len() {
                return Err(Error::Incompatible(format!(
                    "tensor {} has {} indices but {} values",
                    t.name,
                    t.indices.len(),
                    t.values.len()
                )));
            }
            if let Some(pos) = t.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: t.indices[pos] });
            }
        }
        Ok(Self { tensors, provenance })
    }

    /// Values of `params - anchor` on the support of `mask`.
    pub fn from_difference(
        params: &ParameterSet,
        anchor: &ParameterSet,
        mask: &BinaryMask,
        provenance: Provenance,
    ) -> Result<Self> {
        params.check_compatible(anchor)?;
        mask.check_against(params)?;
        let tensors = mask
            .tensors()
            .iter()
            .map(|m| {
                let a = params.get(&m.name).expect("checked");
                let b = anchor.get(&m.name).expect("checked");
                SparseTensor {
                    name: m.name.clone(),
                    shape: m.shape.clone(),
                    indices: m.indices.clone(),
                    values: m.indices.iter().map(|&i| a.data()[i] - b.data()[i]).collect(),
                }
            })
            .collect();
        Self::new(tensors, provenance)
    }

    pub fn tensors(&self) -> &[SparseTensor] {
        &self.tensors
    }

    pub fn k(&self) -> usize {
        self.tensors.iter().map(|t| t.indices.len()).sum()
    }

    pub fn support(&self) -> BinaryMask {
        BinaryMask {
            tensors: self
                .tensors
                .iter()
                .map(|t| MaskTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    indices: t.indices.clone(),
                })
                .collect(),
        }
    }

    /// Dense, parameter-set-shaped copy; zeros off the support.
    pub fn densify(&self, template: &ParameterSet) -> Result<DeltaSet> {
        self.support().check_against(template)?;
        let mut out = template.zeros_like();
        for t in &self.tensors {
            let i = template.index_of(&t.name).expect("checked");
            let data = out.tensor_mut(i).data_mut();
            for (&idx, &v) in t.indices.iter().zip(&t.values) {
                data[idx] = v;
            }
        }
        Ok(DeltaSet(out))
    }

    /// Digest over provenance, support and exact values.
    pub fn content_digest(&self) -> u64 {
        let mut d = Digest::new();
        d.str("sparse-vector");
        let p = &self.provenance;
        d.u64(p.kind.tag() as u64)
            .u64(p.config_digest)
            .u64(p.spec_digest)
            .u64(p.base_digest)
            .u64(p.init_digest)
            .u64(p.parent.map_or(0, |x| x ^ 1))
            .u64(p.parent.is_some() as u64);
        for t in &self.tensors {
            d.str(&t.name);
            for (&i, &v) in t.indices.iter().zip(&t.values) {
                d.u64(i as u64).f64(v);
            }
        }
        d.finish()
    }
}

/// Dense per-tensor differences, index-compatible with a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet(pub ParameterSet);

impl DeltaSet {
    pub fn params(&self) -> &ParameterSet {
        &self.0
    }

    /// Restricts to the support of `mask` as a sparse vector.
    pub fn restrict(&self, mask: &BinaryMask, provenance: Provenance) -> Result<SparseVector> {
        let zero = self.0.zeros_like();
        SparseVector::from_difference(&self.0, &zero, mask, provenance)
    }

    pub fn class_of(&self, name: &str) -> Option<TensorClass> {
        self.0.index_of(name).map(|i| self.0.entry(i).class)
    }
}

/// Something that can be added onto a base parameter set.
#[derive(Debug, Clone, PartialEq)]
pub enum Composable {
    Sparse(SparseVector),
    Dense(DeltaSet),
}
