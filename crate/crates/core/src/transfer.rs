//! Arithmetic composition of difference vectors and the zero-shot
//! cross-lingual pipeline built from them.

use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::deft::{budget_from_fraction, run_variant, DeftConfig, DenoiseConfig, RunInputs, RunOutput, Variant};
use crate::metrics;
use crate::model::{self, Batch, Labels, ModelSpec, ParameterSet, TensorClass};
use crate::optim::{DataSource, FreezeSet, SelectionMetric, TrainConfig};
use crate::sparse::{Composable, VectorKind};
use crate::{Error, Result};

impl Composable {
    pub fn digest(&self) -> u64 {
        match self {
            Composable::Sparse(v) => v.content_digest(),
            Composable::Dense(d) => d.params().digest(),
        }
    }

    fn check_against(&self, base: &ParameterSet) -> Result<()> {
        match self {
            Composable::Sparse(v) => v.support().check_against(base),
            Composable::Dense(d) => d.params().check_compatible(base),
        }
    }
}

/// `base + Σ vectors`, elementwise.
///
/// Contributions to a coordinate are summed in sorted order before being
/// added to the base, so the result does not depend on the order of
/// `vectors`. Coordinates whose contributions sum to zero keep the base
/// value bit-for-bit.
pub fn compose(base: &ParameterSet, vectors: &[Composable]) -> Result<ParameterSet> {
    for v in vectors {
        v.check_against(base)?;
    }
    let mut out = base.clone();
    for ti in 0..base.len() {
        let name = &base.entry(ti).name;
        let len = base.tensor(ti).len();
        let mut contrib: Vec<Vec<f64>> = vec![Vec::new(); len];
        let mut touched = false;
        for v in vectors {
            match v {
                Composable::Sparse(sv) => {
                    if let Some(t) = sv.tensors().iter().find(|t| &t.name == name) {
                        for (&i, &x) in t.indices.iter().zip(&t.values) {
                            contrib[i].push(x);
                            touched = true;
                        }
                    }
                }
                Composable::Dense(d) => {
                    for (i, &x) in d.params().tensor(ti).data().iter().enumerate() {
                        contrib[i].push(x);
                    }
                    touched = true;
                }
            }
        }
        if !touched {
            continue;
        }
        let data = out.tensor_mut(ti).data_mut();
        for (i, mut c) in contrib.into_iter().enumerate() {
            if c.is_empty() {
                continue;
            }
            c.sort_by(|a, b| a.total_cmp(b));
            let sum: f64 = c.iter().sum();
            if sum != 0.0 {
                data[i] += sum;
            }
        }
    }
    Ok(out)
}

/// Base parameters, the vectors applied to them and the task head.
#[derive(Debug, Clone)]
pub struct ComposedModel {
    pub base: ParameterSet,
    pub applied: Vec<Composable>,
    pub head: Option<ParameterSet>,
}

impl ComposedModel {
    pub fn materialize(&self) -> Result<ParameterSet> {
        let mut p = compose(&self.base, &self.applied)?;
        if let Some(h) = &self.head {
            if h.iter().any(|e| e.class != TensorClass::Head) {
                return Err(Error::Incompatible("head fragment holds non-head tensors".into()));
            }
            p.overwrite_from(h)?;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalMetric {
    Accuracy,
    MacroF1,
}

impl EvalMetric {
    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::MacroF1 => "macro_f1",
        }
    }
}

/// Predictions and labels over labeled test batches.
pub fn predictions(spec: &ModelSpec, params: &ParameterSet, test: &[Batch]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for b in test {
        let Labels::Class(y) = &b.labels else {
            return Err(Error::Evaluation("test batches need class labels".into()));
        };
        labels.extend_from_slice(y);
        preds.extend(model::predict(spec, params, b)?);
    }
    if labels.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    Ok((labels, preds))
}

pub fn zero_shot_eval(spec: &ModelSpec, composed: &ComposedModel, test: &[Batch], metric: EvalMetric) -> Result<f64> {
    let params = composed.materialize()?;
    score(spec, &params, test, metric)
}

/// Metric of already materialized parameters.
pub fn score(spec: &ModelSpec, params: &ParameterSet, test: &[Batch], metric: EvalMetric) -> Result<f64> {
    let (labels, preds) = predictions(spec, params, test)?;
    match metric {
        EvalMetric::Accuracy => metrics::accuracy(&labels, &preds),
        EvalMetric::MacroF1 => metrics::macro_f1(&labels, &preds, spec.n_classes),
    }
}

/// Settings for producing one language or task vector.
#[derive(Debug, Clone)]
pub struct VectorJob {
    pub train: TrainConfig,
    /// Mask budget as a fraction of eligible scalars.
    pub budget_fraction: f64,
    /// `None` runs the plain lottery-ticket baseline.
    pub denoise: Option<DenoiseConfig>,
    pub workers: usize,
    pub variant: Variant,
}

impl VectorJob {
    /// Language adaptation defaults: L1 0.1, validation-loss selection,
    /// 2.8% budget.
    pub fn language_default() -> Self {
        Self {
            train: TrainConfig {
                l1_lambda: 0.1,
                selection_metric: SelectionMetric::ValLoss,
                ..TrainConfig::default()
            },
            budget_fraction: 0.028,
            denoise: Some(DenoiseConfig::default()),
            workers: 1,
            variant: Variant::Full,
        }
    }

    /// Task adaptation defaults: F1 selection, 5.2% budget.
    pub fn task_default() -> Self {
        Self {
            train: TrainConfig {
                selection_metric: SelectionMetric::F1,
                ..TrainConfig::default()
            },
            budget_fraction: 0.052,
            denoise: Some(DenoiseConfig::default()),
            workers: 1,
            variant: Variant::Full,
        }
    }

    fn deft_config(&self, params: &ParameterSet, freeze: FreezeSet) -> DeftConfig {
        DeftConfig {
            train: self.train.clone(),
            k: budget_from_fraction(params, &freeze, self.budget_fraction),
            denoise: self.denoise.clone(),
            freeze,
            workers: self.workers,
        }
    }
}

/// Language vector from MLM data; layer norms stay frozen.
pub fn train_language_vector(spec: &ModelSpec, base: &ParameterSet, data: &dyn DataSource, job: &VectorJob) -> Result<RunOutput> {
    if data.objective() != model::Objective::Mlm {
        return Err(Error::Config("language vectors train on MLM data".into()));
    }
    let freeze = FreezeSet::classes(base, &[TensorClass::LayerNorm]);
    let cfg = job.deft_config(base, freeze);
    let inputs = RunInputs {
        spec,
        base,
        init: base,
        parent: None,
        data,
        kind: VectorKind::Language,
    };
    run_variant(&inputs, &cfg, job.variant)
}

/// Task vector trained from `base + source` (or `base` alone), measured
/// relative to that starting point.
pub fn train_task_vector(
    spec: &ModelSpec,
    base: &ParameterSet,
    source: Option<&Composable>,
    data: &dyn DataSource,
    job: &VectorJob,
) -> Result<RunOutput> {
    if data.objective() != model::Objective::Classify {
        return Err(Error::Config("task vectors train on labeled data".into()));
    }
    let init = match source {
        Some(s) => compose(base, core::slice::from_ref(s))?,
        None => base.clone(),
    };
    let cfg = job.deft_config(base, FreezeSet::none());
    let inputs = RunInputs {
        spec,
        base,
        init: &init,
        parent: source.map(Composable::digest),
        data,
        kind: VectorKind::Task,
    };
    run_variant(&inputs, &cfg, job.variant)
}

pub struct CrossLingualOutput {
    pub source: RunOutput,
    pub task: RunOutput,
    pub target: RunOutput,
    pub composed: ComposedModel,
}

/// Source-language vector, task vector trained on top of it, target-language
/// vector, and `base + task + target` with the task head.
pub fn cross_lingual(
    spec: &ModelSpec,
    base: &ParameterSet,
    source_mlm: &dyn DataSource,
    target_mlm: &dyn DataSource,
    task: &dyn DataSource,
    language_job: &VectorJob,
    task_job: &VectorJob,
) -> Result<CrossLingualOutput> {
    let source = train_language_vector(spec, base, source_mlm, language_job)?;
    let task_out = train_task_vector(spec, base, Some(&source.vector), task, task_job)?;
    let target = train_language_vector(spec, base, target_mlm, language_job)?;
    let composed = ComposedModel {
        base: base.clone(),
        applied: vec![task_out.vector.clone(), target.vector.clone()],
        head: task_out.head.clone(),
    };
    Ok(CrossLingualOutput {
        source,
        task: task_out,
        target,
        composed,
    })
}

/// Checks the provenance chain of a cross-lingual run.
pub fn verify_chain(out: &CrossLingualOutput, base: &ParameterSet) -> Result<()> {
    let fail = |m: &str| Err(Error::Incompatible(format!("provenance chain: {m}")));
    let (Some(src), Some(task), Some(tar)) = (out.source.sparse(), out.task.sparse(), out.target.sparse()) else {
        return Ok(());
    };
    let base_digest = base.digest();
    if [src, task, tar].iter().any(|v| v.provenance.base_digest != base_digest) {
        return fail("base digest mismatch");
    }
    if src.provenance.parent.is_some() || tar.provenance.parent.is_some() {
        return fail("language vectors must start from the base");
    }
    if task.provenance.parent != Some(src.content_digest()) {
        return fail("task vector does not name the source vector as parent");
    }
    let init = compose(base, &[Composable::Sparse(src.clone())])?;
    if task.provenance.init_digest != init.digest() {
        return fail("task vector did not start from base + source");
    }
    if src.provenance.kind != VectorKind::Language
        || tar.provenance.kind != VectorKind::Language
        || task.provenance.kind != VectorKind::Task
    {
        return fail("vector kinds");
    }
    Ok(())
}
