//! A small pre-LN transformer encoder with a tied MLM decoder and a
//! two-layer classification head over the position-0 token.

mod encoder;
mod params;

pub use encoder::{backward, forward_loss, logits, predict, ForwardOutput};
pub use params::{init_head, init_params, ParamEntry, ParameterSet, TensorClass};

use alloc::vec::Vec;

use crate::digest::Digest;
use crate::{Error, Result};

/// Reserved token ids shared by every synthetic language.
pub const PAD_TOKEN: u32 = 0;
pub const CLS_TOKEN: u32 = 1;
pub const MASK_TOKEN: u32 = 2;
pub const FIRST_CONTENT_TOKEN: u32 = 3;

/// MLM target marker for positions that do not contribute to the loss.
pub const IGNORE: u32 = u32::MAX;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
            self.n_classes,
        ];
        if fields.contains(&0) {
            return Err(Error::Config(alloc::format!(
                "every model dimension must be >= 1: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(alloc::format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            )));
        }
        if self.vocab_size <= FIRST_CONTENT_TOKEN as usize {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn digest(&self) -> u64 {
        let mut d = Digest::new();
        d.str("model-spec");
        for v in [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
            self.n_classes,
        ] {
            d.u64(v as u64);
        }
        d.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Mlm,
    Classify,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Per-position targets (`batch × seq_len`); [`IGNORE`] marks skipped positions.
    Mlm(Vec<u32>),
    /// One class per example.
    Class(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// `batch × seq_len`, row-major.
    pub tokens: Vec<u32>,
    /// `batch × seq_len`; `false` positions are padding.
    pub attention: Vec<bool>,
    pub labels: Labels,
}

impl Batch {
    pub fn objective(&self) -> Objective {
        match self.labels {
            Labels::Mlm(_) => Objective::Mlm,
            Labels::Class(_) => Objective::Classify,
        }
    }

    /// Pads `sequences` to the longest one. Labels must match the layout.
    pub fn from_sequences(sequences: &[Vec<u32>], labels: Labels) -> Self {
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(sequences.len() * seq_len);
        let mut attention = Vec::with_capacity(sequences.len() * seq_len);
        for s in sequences {
            for t in 0..seq_len {
                tokens.push(s.get(t).copied().unwrap_or(PAD_TOKEN));
                attention.push(t < s.len());
            }
        }
        Self {
            batch_size: sequences.len(),
            seq_len,
            tokens,
            attention,
            labels,
        }
    }

    /// Selects examples by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let t = self.seq_len;
        let mut tokens = Vec::with_capacity(rows.len() * t);
        let mut attention = Vec::with_capacity(rows.len() * t);
        for &r in rows {
            tokens.extend_from_slice(&self.tokens[r * t..(r + 1) * t]);
            attention.extend_from_slice(&self.attention[r * t..(r + 1) * t]);
        }
        let labels = match &self.labels {
            Labels::Mlm(y) => Labels::Mlm(rows.iter().flat_map(|&r| y[r * t..(r + 1) * t].iter().copied()).collect()),
            Labels::Class(y) => Labels::Class(rows.iter().map(|&r| y[r]).collect()),
        };
        Batch {
            batch_size: rows.len(),
            seq_len: t,
            tokens,
            attention,
            labels,
        }
    }

    /// Structural checks against a model spec.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let cells = self.batch_size * self.seq_len;
        if self.tokens.len() != cells || self.attention.len() != cells {
            return Err(Error::Incompatible("batch token/attention layout".into()));
        }
        if self.seq_len > spec.max_seq_len {
            return Err(Error::Incompatible(alloc::format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq_len,
                spec.max_seq_len
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
            return Err(Error::Incompatible(alloc::format!(
                "token id {bad} >= vocab size {}",
                spec.vocab_size
            )));
        }
        match &self.labels {
            Labels::Mlm(y) => {
                if y.len() != cells {
                    return Err(Error::Incompatible("mlm label layout".into()));
                }
                let mut any = false;
                for (i, &t) in y.iter().enumerate() {
                    if t == IGNORE {
                        continue;
                    }
                    if t as usize >= spec.vocab_size || !self.attention[i] {
                        return Err(Error::Incompatible(alloc::format!(
                            "mlm target at cell {i} is out of range or on padding"
                        )));
                    }
                    any = true;
                }
                if !any {
                    return Err(Error::EmptyObjective);
                }
            }
            Labels::Class(y) => {
                if y.len() != self.batch_size {
                    return Err(Error::Incompatible("class label count".into()));
                }
                if y.is_empty() {
                    return Err(Error::EmptyObjective);
                }
                if let Some(&bad) = y.iter().find(|&&c| c >= spec.n_classes) {
                    return Err(Error::Incompatible(alloc::format!(
                        "class label {bad} >= n_classes {}",
                        spec.n_classes
                    )));
                }
                if (0..self.batch_size).any(|b| !self.attention[b * self.seq_len]) {
                    return Err(Error::Incompatible(
                        "classification needs position 0 unmasked".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
