//! AdamW/SGD with linear decay, optional proximal L1, and the full and
//! mask-constrained fine-tuning loops with best-checkpoint selection.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::digest::Digest;
use crate::metrics;
use crate::model::{self, Batch, Labels, ModelSpec, Objective, ParameterSet, TensorClass};
use crate::sparse::{BinaryMask, Provenance, SparseVector};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    AdamW,
    /// Plain gradient descent (with the same decoupled weight decay).
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectionMetric {
    ValLoss,
    Accuracy,
    F1,
}

impl SelectionMetric {
    fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            SelectionMetric::ValLoss => candidate < incumbent,
            SelectionMetric::Accuracy | SelectionMetric::F1 => candidate > incumbent,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::ValLoss => "val_loss",
            SelectionMetric::Accuracy => "accuracy",
            SelectionMetric::F1 => "f1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "val_loss" => Some(Self::ValLoss),
            "accuracy" => Some(Self::Accuracy),
            "f1" => Some(Self::F1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Proximal L1 pull toward the run's starting point.
    pub l1_lambda: f64,
    pub eval_interval: usize,
    pub selection_metric: SelectionMetric,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            max_steps: 2000,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            l1_lambda: 0.0,
            eval_interval: 100,
            selection_metric: SelectionMetric::ValLoss,
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{m}: {self:?}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.l1_lambda >= 0.0) {
            return bad("l1_lambda must be >= 0");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }

    /// Linearly decayed rate for the update at `step` (0-based); zero at `max_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.max_steps == 0 || step >= self.max_steps {
            return 0.0;
        }
        self.lr * (1.0 - step as f64 / self.max_steps as f64)
    }

    pub fn digest(&self) -> u64 {
        let mut d = Digest::new();
        d.str("train-config")
            .f64(self.lr)
            .u64(self.max_steps as u64)
            .u64(self.batch_size as u64)
            .u64(self.seed)
            .f64(self.beta1)
            .f64(self.beta2)
            .f64(self.epsilon)
            .f64(self.weight_decay)
            .f64(self.l1_lambda)
            .u64(self.eval_interval as u64)
            .str(self.selection_metric.name())
            .u64(matches!(self.optimizer, OptimizerKind::Sgd) as u64);
        d.finish()
    }
}

/// Names of tensors excluded from updates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeSet(BTreeSet<String>);

impl FreezeSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(names: I, params: &ParameterSet) -> Result<Self> {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        if let Some(missing) = set.iter().find(|n| params.index_of(n).is_none()) {
            return Err(Error::Config(format!("freeze set names unknown tensor {missing}")));
        }
        Ok(Self(set))
    }

    /// All tensors of the given classes.
    pub fn classes(params: &ParameterSet, classes: &[TensorClass]) -> Self {
        Self(
            params
                .iter()
                .filter(|e| classes.contains(&e.class))
                .map(|e| e.name.clone())
                .collect(),
        )
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn union(&self, other: &FreezeSet) -> FreezeSet {
        FreezeSet(self.0.union(&other.0).cloned().collect())
    }
}

/// Which coordinates of one tensor an optimizer step may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorUpdate {
    Frozen,
    Full,
    /// Sorted flat indices.
    Masked(Vec<usize>),
}

/// First and second moments; entries outside the update plan stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros(params: &ParameterSet) -> Self {
        Self {
            m: params.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
            v: params.iter().map(|e| vec![0.0; e.tensor.len()]).collect(),
        }
    }
}

/// One optimizer update at `step` (0-based) restricted to `plan`.
///
/// Moments are only read and written for updated coordinates, so masking
/// here is equivalent to masking gradients before AdamW. `anchor` is the
/// reference point for the proximal L1 shrinkage.
pub fn adamw_step(
    params: &mut ParameterSet,
    state: &mut AdamState,
    grads: &ParameterSet,
    step: usize,
    cfg: &TrainConfig,
    plan: &[TensorUpdate],
    anchor: &ParameterSet,
) -> Result<()> {
    if plan.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Incompatible("update plan / gradient size".into()));
    }
    let lr = cfg.lr_at(step);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let shrink = lr * cfg.l1_lambda;
    for (ti, rule) in plan.iter().enumerate() {
        let g = grads.tensor(ti).data();
        let a = anchor.tensor(ti).data();
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        let p = params.tensor_mut(ti).data_mut();
        let mut update = |i: usize| -> Result<()> {
            let gi = g[i];
            if !gi.is_finite() {
                return Err(Error::TrainingFailure {
                    step,
                    reason: format!("non-finite gradient in tensor #{ti} at {i}"),
                });
            }
            if cfg.weight_decay != 0.0 {
                p[i] *= 1.0 - lr * cfg.weight_decay;
            }
            match cfg.optimizer {
                OptimizerKind::Sgd => p[i] -= lr * gi,
                OptimizerKind::AdamW => {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (libm::sqrt(vhat) + cfg.epsilon);
                }
            }
            if shrink > 0.0 {
                let d = p[i] - a[i];
                if d.abs() <= shrink {
                    p[i] = a[i];
                } else {
                    p[i] -= shrink.copysign(d);
                }
            }
            Ok(())
        };
        match rule {
            TensorUpdate::Frozen => {}
            TensorUpdate::Full => {
                for i in 0..g.len() {
                    update(i)?;
                }
            }
            TensorUpdate::Masked(idx) => {
                for &i in idx {
                    update(i)?;
                }
            }
        }
    }
    Ok(())
}

/// Training and validation batches for one objective.
pub trait DataSource {
    fn objective(&self) -> Objective;
    /// Deterministic batch for `step` of a run seeded with `seed`.
    fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Batch;
    fn val_batches(&self) -> &[Batch];
    fn is_empty(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// The selected checkpoint.
    pub params: ParameterSet,
    /// Number of updates applied to the selected checkpoint.
    pub best_step: usize,
    pub best_metric: Option<f64>,
    pub log: Vec<LogRecord>,
    pub warnings: Vec<String>,
}

/// Evaluates `metric` over validation batches.
pub fn evaluate(spec: &ModelSpec, params: &ParameterSet, batches: &[Batch], metric: SelectionMetric) -> Result<f64> {
    match metric {
        SelectionMetric::ValLoss => {
            let mut total = 0.0;
            let mut count = 0usize;
            for b in batches {
                let out = model::forward_loss(spec, params, b, b.objective())?;
                total += out.loss * out.count as f64;
                count += out.count;
            }
            if count == 0 {
                return Err(Error::Evaluation("no validation targets".into()));
            }
            Ok(total / count as f64)
        }
        SelectionMetric::Accuracy | SelectionMetric::F1 => {
            let mut labels = Vec::new();
            let mut preds = Vec::new();
            for b in batches {
                match &b.labels {
                    Labels::Class(y) => labels.extend_from_slice(y),
                    Labels::Mlm(_) => {
                        return Err(Error::Evaluation(format!(
                            "{} needs class labels",
                            metric.name()
                        )))
                    }
                }
                preds.extend(model::predict(spec, params, b)?);
            }
            if metric == SelectionMetric::Accuracy {
                metrics::accuracy(&labels, &preds)
            } else {
                metrics::macro_f1(&labels, &preds, spec.n_classes)
            }
        }
    }
}

/// Runs `cfg.max_steps` updates under `plan`, selecting the best evaluated
/// checkpoint (or the last one if there is no validation data).
pub fn train(
    spec: &ModelSpec,
    init: &ParameterSet,
    data: &dyn DataSource,
    cfg: &TrainConfig,
    plan: &[TensorUpdate],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let objective = data.objective();
    let mut params = init.clone();
    let mut state = AdamState::zeros(&params);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let has_val = !data.val_batches().is_empty();
    for step in 0..cfg.max_steps {
        let batch = data.train_batch(step, cfg.batch_size, cfg.seed);
        let (loss, grads) = model::backward(spec, &params, &batch, objective, 1.0)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        adamw_step(&mut params, &mut state, &grads, step, cfg, plan, init)?;
        let done = step + 1;
        let mut eval_metric = None;
        if has_val && (done % cfg.eval_interval == 0 || done == cfg.max_steps) {
            let metric = evaluate(spec, &params, data.val_batches(), cfg.selection_metric)?;
            if !metric.is_finite() {
                return Err(Error::TrainingFailure {
                    step,
                    reason: format!("validation metric is {metric}"),
                });
            }
            eval_metric = Some(metric);
            let improves = match &best {
                None => true,
                Some((b, _, _)) => cfg.selection_metric.better(metric, *b),
            };
            if improves {
                best = Some((metric, done, params.clone()));
            }
        }
        log.push(LogRecord {
            step: done,
            lr: cfg.lr_at(step),
            train_loss: loss,
            eval_metric,
        });
    }
    let (best_metric, best_step, params) = match best {
        Some((m, s, p)) => (Some(m), s, p),
        None => (None, cfg.max_steps, params),
    };
    Ok(TrainOutcome {
        params,
        best_step,
        best_metric,
        log,
        warnings: Vec::new(),
    })
}

/// Per-tensor plan for dense training: everything except frozen tensors,
/// with head tensors trained only under the classification objective.
pub fn full_plan(params: &ParameterSet, freeze: &FreezeSet, objective: Objective) -> Vec<TensorUpdate> {
    params
        .iter()
        .map(|e| {
            if freeze.contains(&e.name) || (e.class == TensorClass::Head && objective != Objective::Classify) {
                TensorUpdate::Frozen
            } else {
                TensorUpdate::Full
            }
        })
        .collect()
}

/// Dense fine-tuning from `init`.
pub fn full_finetune(
    spec: &ModelSpec,
    init: &ParameterSet,
    data: &dyn DataSource,
    cfg: &TrainConfig,
    freeze: &FreezeSet,
) -> Result<TrainOutcome> {
    let plan = full_plan(init, freeze, data.objective());
    train(spec, init, data, cfg, &plan)
}

/// Whether head tensors are trained alongside a sparse run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Frozen,
    Train,
}

pub struct SparseOutcome {
    pub phi: SparseVector,
    pub train: TrainOutcome,
}

/// Fine-tunes only the coordinates in `mask` (plus the head under
/// [`HeadMode::Train`]) and returns the difference on the mask's support.
#[allow(clippy::too_many_arguments)]
pub fn sparse_finetune(
    spec: &ModelSpec,
    init: &ParameterSet,
    mask: &BinaryMask,
    data: &dyn DataSource,
    cfg: &TrainConfig,
    freeze: &FreezeSet,
    head: HeadMode,
    provenance: Provenance,
) -> Result<SparseOutcome> {
    mask.check_against(init)?;
    let mut plan = vec![TensorUpdate::Frozen; init.len()];
    for m in mask.tensors() {
        if freeze.contains(&m.name) {
            return Err(Error::Config(format!("mask selects frozen tensor {}", m.name)));
        }
        let i = init.index_of(&m.name).expect("checked");
        if init.entry(i).class == TensorClass::Head {
            return Err(Error::Config(format!("mask selects head tensor {}", m.name)));
        }
        if !m.indices.is_empty() {
            plan[i] = TensorUpdate::Masked(m.indices.clone());
        }
    }
    if head == HeadMode::Train {
        for (i, e) in init.iter().enumerate() {
            if e.class == TensorClass::Head && !freeze.contains(&e.name) {
                plan[i] = TensorUpdate::Full;
            }
        }
    }
    let mut warnings = Vec::new();
    let train_out = if mask.k() == 0 && head == HeadMode::Frozen {
        if cfg.max_steps > 0 {
            warnings.push(String::from("degenerate mask: empty support, nothing to train"));
        }
        TrainOutcome {
            params: init.clone(),
            best_step: 0,
            best_metric: None,
            log: Vec::new(),
            warnings: Vec::new(),
        }
    } else {
        if mask.k() == 0 && cfg.max_steps > 0 {
            warnings.push(String::from("degenerate mask: empty support, only the head is trained"));
        }
        train(spec, init, data, cfg, &plan)?
    };
    let phi = SparseVector::from_difference(&train_out.params, init, mask, provenance)?;
    let mut train = train_out;
    train.warnings.extend(warnings);
    Ok(SparseOutcome { phi, train })
}

/// Samples `batch_size` example indices for a step.
pub fn sample_indices(n: usize, step: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(Rng::derive(seed, step as u64));
    (0..batch_size).map(|_| rng.below(n)).collect()
}
