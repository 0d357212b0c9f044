//! Weight deltas, low-rank denoising, global magnitude masks, and the
//! two-phase sparse fine-tuning procedure with its baseline and ablations.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use crate::digest::Digest;
use crate::model::{init_head, ModelSpec, Objective, ParameterSet, TensorClass};
use crate::numerics::{svd, top_k_indices, Tensor};
use crate::optim::{full_finetune, sparse_finetune, DataSource, FreezeSet, HeadMode, TrainConfig, TrainOutcome};
use crate::{Error, Result, Rng};

pub use crate::sparse::{BinaryMask, Composable, DeltaSet, MaskTensor, Provenance, SparseTensor, SparseVector, VectorKind};

/// `θ1 − θ0`, exact elementwise.
pub fn compute_delta(theta1: &ParameterSet, theta0: &ParameterSet) -> Result<DeltaSet> {
    theta1.check_compatible(theta0)?;
    let mut out = theta1.zeros_like();
    for i in 0..theta1.len() {
        *out.tensor_mut(i) = theta1.tensor(i).sub(theta0.tensor(i))?;
    }
    Ok(DeltaSet(out))
}

/// Per-matrix rule for the number of singular triplets kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// Fixed rank, clamped to `min(m, n)`.
    Uniform(usize),
    /// Smallest rank whose cumulative `σ²` reaches this fraction of the total.
    VarianceFraction(f64),
    /// Same rule on `σ` instead of `σ²`.
    LinearFraction(f64),
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::Uniform(_) => Ok(()),
            RankPolicy::VarianceFraction(f) | RankPolicy::LinearFraction(f) => {
                if f > 0.0 && f <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("rank fraction {f} outside (0, 1]")))
                }
            }
        }
    }
}

/// Rank chosen by `policy` for singular values `s` (non-increasing).
pub fn select_rank(s: &[f64], policy: RankPolicy) -> usize {
    let fraction_rank = |weights: Vec<f64>, f: f64| {
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return 0;
        }
        let mut cum = 0.0;
        for (i, w) in weights.iter().enumerate() {
            cum += w;
            if cum / total >= f {
                return i + 1;
            }
        }
        weights.len()
    };
    match policy {
        RankPolicy::Uniform(r) => r.min(s.len()),
        RankPolicy::VarianceFraction(f) => fraction_rank(s.iter().map(|x| x * x).collect(), f),
        RankPolicy::LinearFraction(f) => fraction_rank(s.to_vec(), f),
    }
}

/// Number of residual entries kept for an `m × n` matrix.
pub fn retained_count(retain_fraction: f64, m: usize, n: usize) -> usize {
    let c = libm::round(retain_fraction * (m * n) as f64);
    if c <= 0.0 {
        0
    } else {
        (c as usize).min(m * n)
    }
}

fn denoise_from_factors(w: &Tensor, factors: &crate::numerics::SvdFactors, r: usize, retain_fraction: f64) -> Result<Tensor> {
    let (m, n) = w.dims2()?;
    let low = factors.truncated(r);
    let residual = w.sub(&low)?;
    let keep = top_k_indices(residual.data(), retained_count(retain_fraction, m, n))?;
    let mut out = low;
    let data = out.data_mut();
    for i in keep {
        data[i] += residual.data()[i];
    }
    Ok(out)
}

/// `L + S`: rank-`r` reconstruction plus the largest-magnitude
/// `round(retain_fraction · m·n)` residual entries.
pub fn denoise_matrix(w: &Tensor, r: usize, retain_fraction: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&retain_fraction) {
        return Err(Error::Config(format!("retain fraction {retain_fraction} outside [0, 1]")));
    }
    let (m, n) = w.dims2()?;
    if r > m.min(n) {
        return Err(Error::Config(format!("rank {r} exceeds min({m}, {n})")));
    }
    let f = svd(w)?;
    denoise_from_factors(w, &f, r, retain_fraction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    pub rank_policy: RankPolicy,
    pub residual_retain_fraction: f64,
    /// Classes whose 2-D tensors are denoised; biases are never denoised.
    pub denoise_classes: BTreeSet<TensorClass>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            rank_policy: RankPolicy::VarianceFraction(0.9),
            residual_retain_fraction: 0.05,
            denoise_classes: [TensorClass::WeightMatrix, TensorClass::Embedding].into_iter().collect(),
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        self.rank_policy.validate()?;
        if !(0.0..=1.0).contains(&self.residual_retain_fraction) {
            return Err(Error::Config("residual_retain_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn applies_to(&self, class: TensorClass, tensor: &Tensor) -> bool {
        class != TensorClass::Bias && self.denoise_classes.contains(&class) && tensor.rank() == 2
    }

    pub fn digest_into(&self, d: &mut Digest) {
        match self.rank_policy {
            RankPolicy::Uniform(r) => d.str("uniform").u64(r as u64),
            RankPolicy::VarianceFraction(f) => d.str("var").f64(f),
            RankPolicy::LinearFraction(f) => d.str("linear").f64(f),
        };
        d.f64(self.residual_retain_fraction);
        for c in &self.denoise_classes {
            d.u64(c.tag() as u64);
        }
    }
}

/// Rank chosen for one denoised matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
}

fn denoise_one(tensor: &Tensor, cfg: &DenoiseConfig) -> Result<(Tensor, usize)> {
    let f = svd(tensor)?;
    let r = select_rank(&f.s, cfg.rank_policy);
    Ok((denoise_from_factors(tensor, &f, r, cfg.residual_retain_fraction)?, r))
}

/// Denoises every eligible matrix independently; `workers > 1` fans the
/// matrices out over scoped threads (same result for any worker count).
pub fn denoise_delta(delta: &DeltaSet, cfg: &DenoiseConfig, workers: usize) -> Result<(DeltaSet, Vec<RankRecord>)> {
    cfg.validate()?;
    let params = delta.params();
    let jobs: Vec<usize> = (0..params.len())
        .filter(|&i| cfg.applies_to(params.entry(i).class, params.tensor(i)))
        .collect();
    let results = run_jobs(&jobs, workers, |i| denoise_one(params.tensor(i), cfg));
    let mut out = params.clone();
    let mut ranks = Vec::with_capacity(jobs.len());
    for (&i, res) in jobs.iter().zip(results) {
        let (t, r) = res?;
        let (rows, cols) = t.dims2()?;
        ranks.push(RankRecord {
            name: params.entry(i).name.clone(),
            rows,
            cols,
            rank: r,
        });
        *out.tensor_mut(i) = t;
    }
    Ok((DeltaSet(out), ranks))
}

#[cfg(feature = "std")]
fn run_jobs<T: Send>(jobs: &[usize], workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(|&j| f(j)).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<T>> = jobs.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    jobs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(pos, &j)| (pos, f(j)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (pos, v) in h.join().expect("denoise worker panicked") {
                slots[pos] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

#[cfg(not(feature = "std"))]
fn run_jobs<T>(jobs: &[usize], _workers: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    jobs.iter().map(|&j| f(j)).collect()
}

/// Whether a tensor may receive mask entries.
pub fn is_eligible(class: TensorClass, name: &str, excluded: &FreezeSet) -> bool {
    class != TensorClass::Head && !excluded.contains(name)
}

/// Number of scalars eligible for masking.
pub fn eligible_scalars(params: &ParameterSet, excluded: &FreezeSet) -> usize {
    params
        .iter()
        .filter(|e| is_eligible(e.class, &e.name, excluded))
        .map(|e| e.tensor.len())
        .sum()
}

/// `round(fraction · eligible scalars)`.
pub fn budget_from_fraction(params: &ParameterSet, excluded: &FreezeSet, fraction: f64) -> usize {
    libm::round(fraction * eligible_scalars(params, excluded) as f64) as usize
}

/// Exactly `k` coordinates with the largest `|δ̂|` across all eligible
/// tensors; ties go to earlier tensors, then lower indices.
pub fn global_topk_mask(delta: &DeltaSet, k: usize, excluded: &FreezeSet) -> Result<BinaryMask> {
    let params = delta.params();
    let eligible: Vec<usize> = (0..params.len())
        .filter(|&i| is_eligible(params.entry(i).class, &params.entry(i).name, excluded))
        .collect();
    let mut flat = Vec::new();
    let mut offsets = Vec::with_capacity(eligible.len());
    for &i in &eligible {
        offsets.push(flat.len());
        flat.extend_from_slice(params.tensor(i).data());
    }
    let picked = top_k_indices(&flat, k)?;
    let mut tensors: Vec<MaskTensor> = eligible
        .iter()
        .map(|&i| MaskTensor {
            name: params.entry(i).name.clone(),
            shape: params.tensor(i).shape().to_vec(),
            indices: Vec::new(),
        })
        .collect();
    let mut t = 0;
    for g in picked {
        while t + 1 < offsets.len() && offsets[t + 1] <= g {
            t += 1;
        }
        tensors[t].indices.push(g - offsets[t]);
    }
    BinaryMask::new(tensors)
}

/// Everything one run of the procedure needs.
#[derive(Debug, Clone)]
pub struct DeftConfig {
    /// Used for both phases.
    pub train: TrainConfig,
    /// Mask budget (number of coordinates).
    pub k: usize,
    /// `None` selects the plain lottery-ticket baseline.
    pub denoise: Option<DenoiseConfig>,
    /// Tensors excluded from training and from the mask.
    pub freeze: FreezeSet,
    /// Threads for per-matrix SVD.
    pub workers: usize,
}

impl DeftConfig {
    pub fn digest(&self, variant: Variant) -> u64 {
        let mut d = Digest::new();
        d.str("deft-config").u64(self.train.digest()).u64(self.k as u64);
        match &self.denoise {
            None => {
                d.str("no-denoise");
            }
            Some(c) => c.digest_into(&mut d),
        }
        for n in self.freeze.names() {
            d.str(n);
        }
        d.str(variant.name());
        d.finish()
    }
}

/// The full procedure or one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Residual retention forced to 0.
    NoHigherOrder,
    /// The dense denoised delta itself.
    NoPruneNoSft,
    /// Mask applied to the denoised delta, no retraining.
    NoSft,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoHigherOrder, Variant::NoPruneNoSft, Variant::NoSft];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "none",
            Variant::NoHigherOrder => "no_higher_order",
            Variant::NoPruneNoSft => "no_prune_no_sft",
            Variant::NoSft => "no_sft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Inputs shared by all variants.
pub struct RunInputs<'a> {
    pub spec: &'a ModelSpec,
    /// Pretrained parameters the result is composed onto.
    pub base: &'a ParameterSet,
    /// Starting point: `base`, or `base` plus a source-language vector.
    pub init: &'a ParameterSet,
    /// Content digest of the vector folded into `init`, if any.
    pub parent: Option<u64>,
    pub data: &'a dyn DataSource,
    pub kind: VectorKind,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub vector: Composable,
    /// Classification head from the run's last phase.
    pub head: Option<ParameterSet>,
    pub mask: Option<BinaryMask>,
    pub delta: DeltaSet,
    pub denoised: DeltaSet,
    pub ranks: Vec<RankRecord>,
    pub phase1: TrainOutcome,
    pub phase2: Option<TrainOutcome>,
}

impl RunOutput {
    pub fn sparse(&self) -> Option<&SparseVector> {
        match &self.vector {
            Composable::Sparse(v) => Some(v),
            Composable::Dense(_) => None,
        }
    }
}

fn with_fresh_head(spec: &ModelSpec, params: &ParameterSet, seed: u64, phase: u64) -> Result<ParameterSet> {
    let mut p = params.clone();
    p.overwrite_from(&init_head(spec, &Rng::new(Rng::derive(seed, 0x4ead_0000 + phase)))?)?;
    Ok(p)
}

fn head_of(params: &ParameterSet) -> ParameterSet {
    params.filter_classes(|c| c == TensorClass::Head)
}

/// Runs `variant` of the two-phase procedure.
pub fn run_variant(inputs: &RunInputs<'_>, cfg: &DeftConfig, variant: Variant) -> Result<RunOutput> {
    let RunInputs { spec, base, init, parent, data, kind } = *inputs;
    base.check_compatible(init)?;
    let objective = data.objective();
    let classify = objective == Objective::Classify;
    let provenance = Provenance {
        kind,
        config_digest: cfg.digest(variant),
        spec_digest: spec.digest(),
        base_digest: base.digest(),
        init_digest: init.digest(),
        parent,
    };

    // Phase 1: dense fine-tuning.
    let start1 = if classify {
        with_fresh_head(spec, init, cfg.train.seed, 1)?
    } else {
        init.clone()
    };
    let phase1 = full_finetune(spec, &start1, data, &cfg.train, &cfg.freeze)?;
    let mut delta = compute_delta(&phase1.params, &start1)?;
    for i in 0..delta.0.len() {
        if delta.0.entry(i).class == TensorClass::Head {
            *delta.0.tensor_mut(i) = Tensor::zeros(delta.0.tensor(i).shape());
        }
    }

    let denoise_cfg = match (variant, &cfg.denoise) {
        (Variant::NoHigherOrder, Some(c)) => Some(DenoiseConfig {
            residual_retain_fraction: 0.0,
            ..c.clone()
        }),
        (Variant::NoHigherOrder, None) => {
            return Err(Error::Config("no_higher_order needs a denoising configuration".into()))
        }
        (_, c) => c.clone(),
    };
    let (denoised, ranks) = match &denoise_cfg {
        Some(c) => denoise_delta(&delta, c, cfg.workers)?,
        None => (delta.clone(), Vec::new()),
    };

    if variant == Variant::NoPruneNoSft {
        return Ok(RunOutput {
            vector: Composable::Dense(denoised.clone()),
            head: classify.then(|| head_of(&phase1.params)),
            mask: None,
            delta,
            denoised,
            ranks,
            phase1,
            phase2: None,
        });
    }

    let mask = global_topk_mask(&denoised, cfg.k, &cfg.freeze)?;

    if variant == Variant::NoSft {
        let phi = denoised.restrict(&mask, provenance)?;
        return Ok(RunOutput {
            vector: Composable::Sparse(phi),
            head: classify.then(|| head_of(&phase1.params)),
            mask: Some(mask),
            delta,
            denoised,
            ranks,
            phase1,
            phase2: None,
        });
    }

    // Phase 2: reset to the starting point and train only the mask.
    let start2 = if classify {
        with_fresh_head(spec, init, cfg.train.seed, 2)?
    } else {
        init.clone()
    };
    let head_mode = if classify { HeadMode::Train } else { HeadMode::Frozen };
    let out = sparse_finetune(spec, &start2, &mask, data, &cfg.train, &cfg.freeze, head_mode, provenance)?;
    Ok(RunOutput {
        vector: Composable::Sparse(out.phi),
        head: classify.then(|| head_of(&out.train.params)),
        mask: Some(mask),
        delta,
        denoised,
        ranks,
        phase1,
        phase2: Some(out.train),
    })
}

/// Full procedure; `cfg.denoise` must be set.
pub fn deftx(inputs: &RunInputs<'_>, cfg: &DeftConfig) -> Result<RunOutput> {
    if cfg.denoise.is_none() {
        return Err(Error::Config("deftx needs a denoising configuration".into()));
    }
    run_variant(inputs, cfg, Variant::Full)
}

/// The lottery-ticket baseline: mask from the raw delta.
pub fn lt_sft(inputs: &RunInputs<'_>, cfg: &DeftConfig) -> Result<RunOutput> {
    let cfg = DeftConfig {
        denoise: None,
        ..cfg.clone()
    };
    run_variant(inputs, &cfg, Variant::Full)
}
