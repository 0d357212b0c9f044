use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use super::ModelSpec;
use crate::digest::Digest;
use crate::numerics::{Rng, Tensor};
use crate::{Error, Result};

/// Role of a tensor; drives denoising eligibility, freezing and budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorClass {
    WeightMatrix,
    Bias,
    LayerNorm,
    Embedding,
    Head,
}

impl TensorClass {
    pub const ALL: [TensorClass; 5] = [
        TensorClass::WeightMatrix,
        TensorClass::Bias,
        TensorClass::LayerNorm,
        TensorClass::Embedding,
        TensorClass::Head,
    ];

    pub fn tag(self) -> u8 {
        match self {
            TensorClass::WeightMatrix => 0,
            TensorClass::Bias => 1,
            TensorClass::LayerNorm => 2,
            TensorClass::Embedding => 3,
            TensorClass::Head => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorClass::WeightMatrix => "weight",
            TensorClass::Bias => "bias",
            TensorClass::LayerNorm => "layer_norm",
            TensorClass::Embedding => "embedding",
            TensorClass::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub class: TensorClass,
    pub tensor: Tensor,
}

/// Ordered, uniquely named tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, class: TensorClass, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Incompatible(format!("duplicate tensor name {name}")));
        }
        self.entries.push(ParamEntry { name, class, tensor });
        Ok(())
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

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    /// Mutable data of two tensors, `a < b`.
    pub(crate) fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert!(a < b);
        let (lo, hi) = self.entries.split_at_mut(b);
        (lo[a].tensor.data_mut(), hi[0].tensor.data_mut())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Same names, classes, shapes and order.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Incompatible(format!(
                "{} tensors vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.class != b.class || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor {} {:?}{:?} vs {} {:?}{:?}",
                    a.name,
                    a.class,
                    a.tensor.shape(),
                    b.name,
                    b.class,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    class: e.class,
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    /// Tensors whose class satisfies `keep`, in order.
    pub fn filter_classes(&self, keep: impl Fn(TensorClass) -> bool) -> ParameterSet {
        ParameterSet {
            entries: self.entries.iter().filter(|e| keep(e.class)).cloned().collect(),
        }
    }

    /// Overwrites tensors named in `fragment`; shapes must agree.
    pub fn overwrite_from(&mut self, fragment: &ParameterSet) -> Result<()> {
        for f in &fragment.entries {
            let i = self
                .index_of(&f.name)
                .ok_or_else(|| Error::Incompatible(format!("unknown tensor {}", f.name)))?;
            if self.entries[i].tensor.shape() != f.tensor.shape() {
                return Err(Error::Incompatible(format!("shape mismatch for {}", f.name)));
            }
            self.entries[i].tensor = f.tensor.clone();
        }
        Ok(())
    }

    /// Digest over names, classes, shapes and exact bit patterns.
    pub fn digest(&self) -> u64 {
        let mut d = Digest::new();
        d.str("parameter-set");
        for e in &self.entries {
            d.str(&e.name).u64(e.class.tag() as u64);
            for &x in e.tensor.shape() {
                d.u64(x as u64);
            }
            for &v in e.tensor.data() {
                d.f64(v);
            }
        }
        d.finish()
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Tensor positions inside a parameter set built by [`init_params`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub n_layers: usize,
}

pub(crate) const PER_LAYER: usize = 16;

pub(crate) mod slot {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_SHIFT: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_GAIN: usize = 10;
    pub const LN2_SHIFT: usize = 11;
    pub const W_UP: usize = 12;
    pub const B_UP: usize = 13;
    pub const W_DOWN: usize = 14;
    pub const B_DOWN: usize = 15;
}

impl Layout {
    pub const TOKENS: usize = 0;
    pub const POSITIONS: usize = 1;

    pub fn layer(&self, l: usize, s: usize) -> usize {
        2 + PER_LAYER * l + s
    }
    pub fn final_gain(&self) -> usize {
        2 + PER_LAYER * self.n_layers
    }
    pub fn final_shift(&self) -> usize {
        self.final_gain() + 1
    }
    pub fn mlm_bias(&self) -> usize {
        self.final_gain() + 2
    }
    pub fn head_dense_w(&self) -> usize {
        self.final_gain() + 3
    }
    pub fn head_dense_b(&self) -> usize {
        self.final_gain() + 4
    }
    pub fn head_out_w(&self) -> usize {
        self.final_gain() + 5
    }
    pub fn head_out_b(&self) -> usize {
        self.final_gain() + 6
    }
    pub fn tensor_count(&self) -> usize {
        self.final_gain() + 7
    }
}

fn scaled_normal(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.normal() * scale).collect()).expect("shape")
}

fn weight(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    scaled_normal(rng, &[fan_in, fan_out], 1.0 / libm::sqrt(fan_in as f64))
}

/// Deterministic initialization: matrices `N(0, 1/fan_in)`, biases zero,
/// layer-norm gains one. Embeddings use `fan_in = d_model`.
pub fn init_params(spec: &ModelSpec, rng: &Rng) -> Result<ParameterSet> {
    spec.validate()?;
    let d = spec.d_model;
    let mut rng = rng.fork(0x1417);
    let mut p = ParameterSet::new();
    use TensorClass::*;
    p.push("embed.tokens", Embedding, scaled_normal(&mut rng, &[spec.vocab_size, d], 1.0 / libm::sqrt(d as f64)))?;
    p.push("embed.positions", Embedding, scaled_normal(&mut rng, &[spec.max_seq_len, d], 1.0 / libm::sqrt(d as f64)))?;
    for l in 0..spec.n_layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        p.push(n("ln1.gain"), LayerNorm, Tensor::filled(&[d], 1.0))?;
        p.push(n("ln1.shift"), LayerNorm, Tensor::zeros(&[d]))?;
        for proj in ["q", "k", "v", "o"] {
            p.push(n(&format!("attn.{proj}.weight")), WeightMatrix, weight(&mut rng, d, d))?;
            p.push(n(&format!("attn.{proj}.bias")), Bias, Tensor::zeros(&[d]))?;
        }
        p.push(n("ln2.gain"), LayerNorm, Tensor::filled(&[d], 1.0))?;
        p.push(n("ln2.shift"), LayerNorm, Tensor::zeros(&[d]))?;
        p.push(n("ffn.up.weight"), WeightMatrix, weight(&mut rng, d, spec.d_ff))?;
        p.push(n("ffn.up.bias"), Bias, Tensor::zeros(&[spec.d_ff]))?;
        p.push(n("ffn.down.weight"), WeightMatrix, weight(&mut rng, spec.d_ff, d))?;
        p.push(n("ffn.down.bias"), Bias, Tensor::zeros(&[d]))?;
    }
    p.push("final_ln.gain", LayerNorm, Tensor::filled(&[d], 1.0))?;
    p.push("final_ln.shift", LayerNorm, Tensor::zeros(&[d]))?;
    p.push("mlm.bias", Bias, Tensor::zeros(&[spec.vocab_size]))?;
    for e in init_head(spec, &rng.fork(0x4ead))?.entries {
        p.entries.push(e);
    }
    debug_assert_eq!(p.len(), Layout { n_layers: spec.n_layers }.tensor_count());
    Ok(p)
}

/// Fresh classification-head tensors (the `Head` class fragment).
pub fn init_head(spec: &ModelSpec, rng: &Rng) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = rng.fork(0x4ead);
    let d = spec.d_model;
    let mut p = ParameterSet::new();
    p.push("head.dense.weight", TensorClass::Head, weight(&mut rng, d, d))?;
    p.push("head.dense.bias", TensorClass::Head, Tensor::zeros(&[d]))?;
    p.push("head.out.weight", TensorClass::Head, weight(&mut rng, d, spec.n_classes))?;
    p.push("head.out.bias", TensorClass::Head, Tensor::zeros(&[spec.n_classes]))?;
    Ok(p)
}

/// Verifies `params` has exactly the layout `init_params(spec)` produces.
pub(crate) fn check_layout(spec: &ModelSpec, params: &ParameterSet) -> Result<Layout> {
    let layout = Layout { n_layers: spec.n_layers };
    if params.len() != layout.tensor_count() {
        return Err(Error::Incompatible(format!(
            "expected {} tensors for {spec:?}, got {}",
            layout.tensor_count(),
            params.len()
        )));
    }
    let d = spec.d_model;
    let shape_of = |i: usize| params.tensor(i).shape().to_vec();
    let expect = |i: usize, shape: &[usize]| -> Result<()> {
        if shape_of(i) != shape {
            return Err(Error::Incompatible(format!(
                "tensor {} has shape {:?}, expected {:?}",
                params.entry(i).name,
                shape_of(i),
                shape
            )));
        }
        Ok(())
    };
    expect(Layout::TOKENS, &[spec.vocab_size, d])?;
    expect(Layout::POSITIONS, &[spec.max_seq_len, d])?;
    for l in 0..spec.n_layers {
        use slot::*;
        for s in [LN1_GAIN, LN1_SHIFT, BQ, BK, BV, BO, LN2_GAIN, LN2_SHIFT, B_DOWN] {
            expect(layout.layer(l, s), &[d])?;
        }
        for s in [WQ, WK, WV, WO] {
            expect(layout.layer(l, s), &[d, d])?;
        }
        expect(layout.layer(l, W_UP), &[d, spec.d_ff])?;
        expect(layout.layer(l, B_UP), &[spec.d_ff])?;
        expect(layout.layer(l, W_DOWN), &[spec.d_ff, d])?;
    }
    expect(layout.final_gain(), &[d])?;
    expect(layout.final_shift(), &[d])?;
    expect(layout.mlm_bias(), &[spec.vocab_size])?;
    expect(layout.head_dense_w(), &[d, d])?;
    expect(layout.head_dense_b(), &[d])?;
    expect(layout.head_out_w(), &[d, spec.n_classes])?;
    expect(layout.head_out_b(), &[spec.n_classes])?;
    Ok(layout)
}

impl core::fmt::Display for TensorClass {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

