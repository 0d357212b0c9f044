//! Support overlap between sparse vectors and sparsity diagnostics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{ParameterSet, TensorClass};
use crate::sparse::{BinaryMask, SparseVector};
use crate::{Error, Result};

fn intersection(a: &BinaryMask, b: &BinaryMask) -> usize {
    let mut shared = 0;
    for ta in a.tensors() {
        let Some(tb) = b.get(&ta.name) else { continue };
        let (mut i, mut j) = (0, 0);
        while i < ta.indices.len() && j < tb.indices.len() {
            match ta.indices[i].cmp(&tb.indices[j]) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => {
                    shared += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    shared
}

/// `|a ∩ b| / |a|` (directional).
pub fn mask_overlap(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.k() == 0 {
        return Err(Error::UndefinedOverlap);
    }
    Ok(intersection(a, b) as f64 / a.k() as f64)
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let shared = intersection(a, b);
    let union = a.k() + b.k() - shared;
    if union == 0 {
        return Err(Error::UndefinedOverlap);
    }
    Ok(shared as f64 / union as f64)
}

/// Pairwise directional overlap; entry `(i, j)` is `mask_overlap(v_i, v_j)`.
pub fn overlap_matrix(masks: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
    overlap_matrix_with(masks, mask_overlap)
}

pub fn jaccard_matrix(masks: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
    overlap_matrix_with(masks, jaccard)
}

fn overlap_matrix_with(masks: &[BinaryMask], f: fn(&BinaryMask, &BinaryMask) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    if masks.len() < 2 {
        return Err(Error::Config("overlap matrix needs at least two vectors".into()));
    }
    let n = masks.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = f(&masks[i], &masks[j])?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSparsity {
    pub name: String,
    pub class: TensorClass,
    pub size: usize,
    pub support: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub total: usize,
    pub tensors: Vec<TensorSparsity>,
    /// Keyed by layer index; non-layer tensors are not included.
    pub per_layer: BTreeMap<usize, usize>,
    pub per_class: BTreeMap<TensorClass, usize>,
}

fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

/// Support counts per tensor, layer and class, with value statistics.
pub fn sparsity_report(phi: &SparseVector, params: &ParameterSet) -> Result<SparsityReport> {
    phi.support().check_against(params)?;
    let mut tensors = Vec::new();
    let mut per_layer = BTreeMap::new();
    let mut per_class: BTreeMap<TensorClass, usize> = TensorClass::ALL.into_iter().map(|c| (c, 0)).collect();
    for t in phi.tensors() {
        let i = params.index_of(&t.name).expect("checked");
        let class = params.entry(i).class;
        let support = t.indices.len();
        let abs_sum: f64 = t.values.iter().map(|v| v.abs()).sum();
        tensors.push(TensorSparsity {
            name: t.name.clone(),
            class,
            size: params.tensor(i).len(),
            support,
            mean_abs: if support == 0 { 0.0 } else { abs_sum / support as f64 },
            max_abs: t.values.iter().map(|v| v.abs()).fold(0.0, f64::max),
        });
        *per_class.entry(class).or_default() += support;
        if let Some(l) = layer_of(&t.name) {
            *per_layer.entry(l).or_default() += support;
        }
    }
    Ok(SparsityReport {
        total: phi.k(),
        tensors,
        per_layer,
        per_class,
    })
}
