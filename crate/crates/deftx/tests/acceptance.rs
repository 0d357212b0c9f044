//! Exit criteria. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use deftx::config::ExperimentConfig;
use deftx::harness;
use deftx::manifest::sha256_hex;
use deftx::store;
use deftx_core::analysis::{mask_overlap, overlap_matrix};
use deftx_core::deft::{
    budget_from_fraction, denoise_delta, denoise_matrix, global_topk_mask, run_variant, select_rank, BinaryMask,
    DeftConfig, DeltaSet, DenoiseConfig, MaskTensor, RankPolicy, RunInputs, RunOutput, Variant, VectorKind,
};
use deftx_core::model::{backward, forward_loss, init_params, Batch, Labels, ModelSpec, Objective, ParameterSet, TensorClass, IGNORE};
use deftx_core::numerics::svd;
use deftx_core::optim::{FreezeSet, TrainConfig};
use deftx_core::synthdata::{gen_corpus, Language, LanguageSpec, MlmConfig, MlmData};
use deftx_core::transfer::{score, ComposedModel, EvalMetric};
use deftx_core::{Rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {t:.1?}, limit {limit:?}"));
    }
    Ok(t)
}

fn gaussian(rng: &mut Rng, m: usize, n: usize) -> Tensor {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.normal()).collect()).unwrap()
}

fn bits(p: &ParameterSet) -> Vec<u64> {
    p.iter().flat_map(|e| e.tensor.data().iter().map(|x| x.to_bits())).collect()
}

/// `max |AᵀA - I|` over the columns of `a` (`rows × cols`, row-major).
fn gram_residual(a: &[f64], rows: usize, cols: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..cols {
        for j in 0..cols {
            let dot: f64 = (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum();
            worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

fn c1_svd() -> Outcome {
    let start = Instant::now();
    let (mut worst_rec, mut worst_orth): (f64, f64) = (0.0, 0.0);
    for seed in 0..200u64 {
        let mut rng = Rng::new(seed);
        let m = 1 + rng.below(64);
        let n = 1 + rng.below(64);
        let w = gaussian(&mut rng, m, n);
        let f = svd(&w).map_err(|e| format!("seed {seed}: {e}"))?;
        let p = m.min(n);
        let rec = f.reconstruct().sub(&w).unwrap().frobenius() / w.frobenius();
        let vt_t = f.vt.transpose().unwrap();
        let orth = gram_residual(f.u.data(), m, p).max(gram_residual(vt_t.data(), n, p));
        ensure!(f.s.windows(2).all(|s| s[0] >= s[1]) && f.s.iter().all(|&s| s >= 0.0), "seed {seed}: singular values not sorted");
        worst_rec = worst_rec.max(rec);
        worst_orth = worst_orth.max(orth);
    }
    ensure!(worst_rec <= 1e-10, "reconstruction {worst_rec:e}");
    ensure!(worst_orth <= 1e-10, "orthonormality {worst_orth:e}");
    let t = within(Duration::from_secs(30), start)?;
    Ok(format!("200 matrices, reconstruction {worst_rec:.1e}, orthonormality {worst_orth:.1e}, {t:.1?}"))
}

fn c2_rank_policy() -> Outcome {
    let cases: [(&[f64], RankPolicy, usize); 8] = [
        (&[3.0, 1.0], RankPolicy::VarianceFraction(0.9), 1),
        (&[1.0, 1.0, 1.0, 1.0], RankPolicy::VarianceFraction(0.9), 4),
        (&[4.0, 3.0, 2.0, 1.0], RankPolicy::Uniform(0), 0),
        (&[4.0, 3.0, 2.0, 1.0], RankPolicy::Uniform(2), 2),
        (&[4.0, 3.0, 2.0, 1.0], RankPolicy::Uniform(4), 4),
        (&[4.0, 3.0, 2.0, 1.0], RankPolicy::Uniform(100), 4),
        (&[2.0], RankPolicy::Uniform(7), 1),
        (&[0.0, 0.0], RankPolicy::VarianceFraction(0.9), 0),
    ];
    for (s, policy, expected) in cases {
        let r = select_rank(s, policy);
        ensure!(r == expected, "{s:?} {policy:?}: got {r}, expected {expected}");
    }
    Ok(format!("{} cases exact", cases.len()))
}

fn c3_denoising_identities() -> Outcome {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (m, n) = (2 + rng.below(30), 2 + rng.below(30));
        let w = gaussian(&mut rng, m, n);
        let full = denoise_matrix(&w, m.min(n), 0.0).unwrap();
        let kept = denoise_matrix(&w, rng.below(m.min(n) + 1), 1.0).unwrap();
        for got in [full, kept] {
            worst = worst.max(got.sub(&w).unwrap().frobenius() / w.frobenius());
        }
        let r = rng.below(m.min(n) + 1);
        let f = 0.2 * rng.next_f64();
        let a = denoise_matrix(&w, r, f).unwrap();
        let b = denoise_matrix(&w.scale(-1.0), r, f).unwrap();
        // Exact equality; unretained entries are zeros of either sign.
        ensure!(
            a.data().iter().zip(b.data()).all(|(&x, &y)| x == -y),
            "sign flip not exact for {m}x{n}, r {r}, f {f}"
        );
    }
    ensure!(worst <= 1e-10, "identity error {worst:e}");
    Ok(format!("20 matrices, worst identity error {worst:.1e}, sign flip exact"))
}

fn random_delta(seed: u64) -> DeltaSet {
    let mut rng = Rng::new(seed);
    let mut p = ParameterSet::new();
    let shapes: [(&str, TensorClass, &[usize]); 6] = [
        ("emb", TensorClass::Embedding, &[11, 6]),
        ("w1", TensorClass::WeightMatrix, &[6, 9]),
        ("b1", TensorClass::Bias, &[9]),
        ("ln", TensorClass::LayerNorm, &[6]),
        ("w2", TensorClass::WeightMatrix, &[9, 6]),
        ("head", TensorClass::Head, &[6, 3]),
    ];
    for (name, class, shape) in shapes {
        let n: usize = shape.iter().product();
        // Some exact ties so the tie-break is exercised.
        let data = (0..n).map(|_| if rng.below(10) == 0 { 0.5 } else { rng.normal() }).collect();
        p.push(name, class, Tensor::from_vec(shape, data).unwrap()).unwrap();
    }
    DeltaSet(p)
}

fn mask_set(m: &BinaryMask) -> BTreeSet<(String, usize)> {
    m.tensors().iter().flat_map(|t| t.indices.iter().map(move |&i| (t.name.clone(), i))).collect()
}

fn c4_mask_properties() -> Outcome {
    for seed in 0..20u64 {
        let delta = random_delta(seed);
        let mut rng = Rng::new(seed ^ 0xa11);
        let excluded = FreezeSet::classes(delta.params(), &[TensorClass::LayerNorm]);
        let eligible = budget_from_fraction(delta.params(), &excluded, 1.0);
        let k = rng.below(eligible / 2 + 1);
        let mask = global_topk_mask(&delta, k, &excluded).map_err(|e| e.to_string())?;
        ensure!(mask.k() == k, "seed {seed}: cardinality {} != {k}", mask.k());

        // Oracle: every eligible scalar, full sort by magnitude then position.
        let mut all = Vec::new();
        for (ti, e) in delta.params().iter().enumerate() {
            if e.class == TensorClass::Head || excluded.contains(&e.name) {
                continue;
            }
            for (i, &v) in e.tensor.data().iter().enumerate() {
                all.push((v.abs(), ti, i, e.name.clone()));
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let oracle: BTreeSet<(String, usize)> = all.into_iter().take(k).map(|x| (x.3, x.2)).collect();
        ensure!(mask_set(&mask) == oracle, "seed {seed}: mask differs from full-sort oracle");

        let double = global_topk_mask(&delta, (2 * k).min(eligible), &excluded).map_err(|e| e.to_string())?;
        ensure!(mask_set(&mask).is_subset(&mask_set(&double)), "seed {seed}: mask(k) not inside mask(2k)");
    }
    Ok("20 deltas: cardinality, full-sort oracle and nesting hold".into())
}

fn tiny_spec(n_classes: usize) -> ModelSpec {
    ModelSpec {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 10,
        n_classes,
    }
}

fn tiny_language(id: u32) -> Language {
    Language::new(LanguageSpec {
        id,
        vocab_size: 16,
        base_seed: 4,
        epsilon: 0.5,
        min_len: 4,
        max_len: 8,
    })
    .unwrap()
}

fn tiny_mlm(seed: u64) -> MlmData {
    MlmData::new(&gen_corpus(&tiny_language(0), 150, seed).sentences, 0.1, 16, MlmConfig::default(), 16, seed)
}

fn tiny_deft(base: &ParameterSet, freeze: FreezeSet, denoise: Option<DenoiseConfig>, budget: f64) -> DeftConfig {
    DeftConfig {
        train: TrainConfig {
            lr: 1e-2,
            max_steps: 16,
            batch_size: 8,
            eval_interval: 8,
            l1_lambda: 0.1,
            ..TrainConfig::default()
        },
        k: budget_from_fraction(base, &freeze, budget),
        denoise,
        freeze,
        workers: 1,
    }
}

/// Every coordinate outside the mask (and outside `skip` classes) of the
/// sparse phase's parameters equals the starting point bit for bit.
fn off_mask_equal(run: &RunOutput, start: &ParameterSet, skip: &[TensorClass]) -> Result<usize, String> {
    let mask = run.mask.as_ref().ok_or("run has no mask")?;
    let theta2 = &run.phase2.as_ref().ok_or("run has no sparse phase")?.params;
    let mut checked = 0;
    for (ti, e) in start.iter().enumerate() {
        if skip.contains(&e.class) {
            continue;
        }
        let on: BTreeSet<usize> = mask.get(&e.name).map(|m| m.indices.iter().copied().collect()).unwrap_or_default();
        for (i, (a, b)) in e.tensor.data().iter().zip(theta2.tensor(ti).data()).enumerate() {
            if on.contains(&i) {
                continue;
            }
            checked += 1;
            ensure!(a.to_bits() == b.to_bits(), "{}[{i}] moved off the mask", e.name);
        }
    }
    Ok(checked)
}

fn c5_sparse_freeze(e2e: &[RunOutput], e2e_starts: &[ParameterSet]) -> Outcome {
    let mut checked = 0;
    let mut runs = 0;
    for (seed, denoise) in [(0, Some(DenoiseConfig::default())), (1, None)] {
        let spec = tiny_spec(3);
        let base = init_params(&spec, &Rng::new(seed)).unwrap();
        let data = tiny_mlm(seed);
        let inputs = RunInputs {
            spec: &spec,
            base: &base,
            init: &base,
            parent: None,
            data: &data,
            kind: VectorKind::Language,
        };
        let freeze = FreezeSet::classes(&base, &[TensorClass::LayerNorm]);
        let run = run_variant(&inputs, &tiny_deft(&base, freeze, denoise, 0.05), Variant::Full).map_err(|e| e.to_string())?;
        checked += off_mask_equal(&run, &base, &[])?;
        runs += 1;
    }
    // Runs from the end-to-end transfer experiment; task runs train their head freely.
    for (run, start) in e2e.iter().zip(e2e_starts) {
        checked += off_mask_equal(run, start, &[TensorClass::Head])?;
        runs += 1;
    }
    Ok(format!("{runs} sparse runs, {checked} off-mask coordinates bit-equal"))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn c6_gradient_check() -> Outcome {
    let start = Instant::now();
    let spec = ModelSpec {
        vocab_size: 12,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        n_classes: 3,
    };
    let mut params = init_params(&spec, &Rng::new(5)).unwrap();
    let mut rng = Rng::new(6);
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let seqs = vec![vec![1, 4, 2, 6, 7], vec![1, 8, 9, 3], vec![1, 10, 11, 4, 5, 6]];
    let class = Batch::from_sequences(&seqs, Labels::Class(vec![0, 2, 1]));
    let mut mlm = Batch::from_sequences(&seqs, Labels::Mlm(Vec::new()));
    let mut y = vec![IGNORE; mlm.tokens.len()];
    y[2] = 5;
    y[mlm.seq_len + 3] = 10;
    y[2 * mlm.seq_len + 1] = 3;
    mlm.labels = Labels::Mlm(y);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (objective, batch) in [(Objective::Classify, &class), (Objective::Mlm, &mlm)] {
        let (_, grads) = backward(&spec, &params, batch, objective, 1.0).map_err(|e| e.to_string())?;
        for cls in TensorClass::ALL {
            let idx: Vec<usize> = (0..params.len()).filter(|&i| params.entry(i).class == cls).collect();
            for _ in 0..25 {
                let ti = idx[rng.below(idx.len())];
                let ci = rng.below(params.tensor(ti).len());
                let mut plus = params.clone();
                plus.tensor_mut(ti).data_mut()[ci] += h;
                let mut minus = params.clone();
                minus.tensor_mut(ti).data_mut()[ci] -= h;
                let lp = forward_loss(&spec, &plus, batch, objective).unwrap().loss;
                let lm = forward_loss(&spec, &minus, batch, objective).unwrap().loss;
                let e = rel_err(grads.tensor(ti).data()[ci], (lp - lm) / (2.0 * h));
                worst = worst.max(e);
                count += 1;
            }
        }
    }
    ensure!(worst <= 1e-5, "worst relative error {worst:e}");
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!("{count} coordinates, worst relative error {worst:.1e}, {t:.1?}"))
}

fn c7_ablation_equivalences() -> Outcome {
    let spec = tiny_spec(3);
    let base = init_params(&spec, &Rng::new(9)).unwrap();
    let data = tiny_mlm(9);
    let inputs = RunInputs {
        spec: &spec,
        base: &base,
        init: &base,
        parent: None,
        data: &data,
        kind: VectorKind::Language,
    };
    let cfg = tiny_deft(&base, FreezeSet::classes(&base, &[TensorClass::LayerNorm]), Some(DenoiseConfig::default()), 0.05);
    let compose = |run: &RunOutput| {
        ComposedModel {
            base: base.clone(),
            applied: vec![run.vector.clone()],
            head: None,
        }
        .materialize()
        .unwrap()
    };

    let no_sft = run_variant(&inputs, &cfg, Variant::NoSft).map_err(|e| e.to_string())?;
    let mask = no_sft.mask.as_ref().ok_or("no_sft has no mask")?;
    let mut expected = base.clone();
    for t in mask.tensors() {
        let i = base.index_of(&t.name).unwrap();
        let d = no_sft.denoised.params().tensor(i).data().to_vec();
        let data = expected.tensor_mut(i).data_mut();
        for &j in &t.indices {
            data[j] += d[j];
        }
    }
    ensure!(bits(&compose(&no_sft)) == bits(&expected), "no_sft differs from base + mask * denoised delta");

    let dense = run_variant(&inputs, &cfg, Variant::NoPruneNoSft).map_err(|e| e.to_string())?;
    let mut expected = base.clone();
    for i in 0..base.len() {
        let d = dense.denoised.params().tensor(i).data().to_vec();
        for (x, dx) in expected.tensor_mut(i).data_mut().iter_mut().zip(d) {
            *x += dx;
        }
    }
    ensure!(bits(&compose(&dense)) == bits(&expected), "no_prune_no_sft differs from base + denoised delta");
    ensure!(dense.denoised == no_sft.denoised, "variants disagree on the denoised delta");
    Ok(format!("no_sft (k = {}) and no_prune_no_sft bitwise equal to their definitions", mask.k()))
}

/// Planted signal: rank-2 structure plus 5% sparse spikes, observed through
/// dense Gaussian noise. Returns (denoised-mask recall, magnitude-mask recall)
/// of the top-k coordinates of the clean signal.
fn planted_recall(seed: u64) -> (f64, f64) {
    let (m, n, noise, spike_amp, budget) = (48, 64, 0.5, 3.0, 0.1);
    let mut rng = Rng::new(Rng::derive(seed, 0x91a7));
    let u: Vec<f64> = (0..m * 2).map(|_| rng.normal()).collect();
    let v: Vec<f64> = (0..n * 2).map(|_| rng.normal()).collect();
    let mut clean: Vec<f64> = (0..m * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            (u[2 * i] * v[2 * j] + u[2 * i + 1] * v[2 * j + 1]) / 2f64.sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..m * n).collect();
    rng.shuffle(&mut order);
    let spikes = (0.05 * (m * n) as f64).round() as usize;
    for &ij in &order[..spikes] {
        clean[ij] += if rng.below(2) == 0 { spike_amp } else { -spike_amp };
    }
    let observed: Vec<f64> = clean.iter().map(|&c| c + noise * rng.normal()).collect();
    let k = (budget * (m * n) as f64).round() as usize;

    let top = |values: &[f64]| -> BTreeSet<usize> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
        idx.into_iter().take(k).collect()
    };
    let planted = top(&clean);

    let mut p = ParameterSet::new();
    p.push("w", TensorClass::WeightMatrix, Tensor::matrix(m, n, observed).unwrap()).unwrap();
    let delta = DeltaSet(p);
    let cfg = DenoiseConfig {
        rank_policy: RankPolicy::Uniform(2),
        residual_retain_fraction: 0.05,
        denoise_classes: [TensorClass::WeightMatrix].into_iter().collect(),
    };
    let (denoised, _) = denoise_delta(&delta, &cfg, 1).unwrap();
    let recall = |d: &DeltaSet| {
        let mask = global_topk_mask(d, k, &FreezeSet::none()).unwrap();
        let got: BTreeSet<usize> = mask.tensors()[0].indices.iter().copied().collect();
        got.intersection(&planted).count() as f64 / k as f64
    };
    (recall(&denoised), recall(&delta))
}

/// Smallest recall gain observed for this construction by an independent
/// NumPy implementation (LAPACK SVD, 200 draws) is 0.0228; the required gain
/// is fixed below it.
const PLANTED_MARGIN: f64 = 0.02;

fn c8_signal_recovery() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in 0..20 {
        let (denoised, magnitude) = planted_recall(seed);
        gains.push(denoised - magnitude);
        if denoised >= magnitude + PLANTED_MARGIN {
            wins += 1;
        }
    }
    let t = within(Duration::from_secs(120), start)?;
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let min = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!("{wins}/20 seeds with gain >= {PLANTED_MARGIN}; mean gain {mean:.4}, min {min:.4}, {t:.1?}");
    ensure!(wins >= 16, "{detail}");
    Ok(detail)
}

/// Zero-shot accuracy must exceed the majority-class rate by this much. The
/// pilot put language-B accuracy at 0.71 to 0.88 against a 0.333 majority.
const TRANSFER_MARGIN: f64 = 0.25;

struct Transfer {
    cfg: ExperimentConfig,
    base: ParameterSet,
    lines: Vec<String>,
    full_wins: usize,
    above_majority: usize,
    elapsed: Duration,
    /// Sparse runs and their starting points, for the freeze check.
    runs: Vec<RunOutput>,
    starts: Vec<ParameterSet>,
    /// Language vectors for languages 0, 1 and 2 under seed 0.
    language_vectors: Vec<RunOutput>,
}

fn transfer_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.epsilon = 0.5;
    cfg.data.pretrain_target_sentences = 300;
    cfg.data.task_test = 2000;
    cfg.run.source_lang = 0;
    cfg.run.target_lang = 1;
    cfg.validate().unwrap();
    cfg
}

fn run_transfer() -> Result<Transfer, String> {
    let start = Instant::now();
    let cfg = transfer_config();
    let base = harness::pretrain(&cfg).map_err(|e| e.to_string())?.params;
    let test = harness::test_data(&cfg, 1).map_err(|e| e.to_string())?;
    let batches = harness::test_batches(&cfg, 1).map_err(|e| e.to_string())?;
    let majority = harness::majority_baseline(&test, cfg.data.n_classes);
    let mut t = Transfer {
        cfg: cfg.clone(),
        base: base.clone(),
        lines: Vec::new(),
        full_wins: 0,
        above_majority: 0,
        elapsed: Duration::ZERO,
        runs: Vec::new(),
        starts: Vec::new(),
        language_vectors: Vec::new(),
    };
    for seed in 0..5u64 {
        let mut c = cfg.clone();
        c.language.train.seed = seed;
        c.task.train.seed = seed;
        let out = harness::cross_lingual_run(&c, &base).map_err(|e| e.to_string())?;
        let full = out.composed.materialize().map_err(|e| e.to_string())?;
        let without = harness::without_language(&out).materialize().map_err(|e| e.to_string())?;
        let s_full = score(&c.model, &full, &batches, EvalMetric::Accuracy).map_err(|e| e.to_string())?;
        let s_without = score(&c.model, &without, &batches, EvalMetric::Accuracy).map_err(|e| e.to_string())?;
        t.full_wins += (s_full >= s_without) as usize;
        t.above_majority += (s_full >= majority + TRANSFER_MARGIN) as usize;
        t.lines.push(format!("seed {seed}: composed {s_full:.4}, without language vector {s_without:.4}, majority {majority:.4}"));
        let task_start = ComposedModel {
            base: base.clone(),
            applied: vec![out.source.vector.clone()],
            head: None,
        }
        .materialize()
        .map_err(|e| e.to_string())?;
        if seed == 0 {
            let third = harness::train_language(&c, &base, 2).map_err(|e| e.to_string())?;
            t.language_vectors = vec![out.source.clone(), out.target.clone(), third];
        }
        t.runs.extend([out.source, out.task, out.target]);
        t.starts.extend([base.clone(), task_start, base.clone()]);
    }
    t.elapsed = start.elapsed();
    Ok(t)
}

fn c9_transfer(t: &Transfer) -> Outcome {
    for l in &t.lines {
        println!("    {l}");
    }
    let detail = format!(
        "{}/5 seeds beat majority by {TRANSFER_MARGIN}; {}/5 seeds composed >= without language vector; {:.1?}",
        t.above_majority, t.full_wins, t.elapsed
    );
    ensure!(t.above_majority == 5, "{detail}");
    ensure!(t.full_wins >= 4, "{detail}");
    ensure!(t.elapsed <= Duration::from_secs(600), "{detail}");
    Ok(detail)
}

fn c10_determinism(t: &Transfer) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut digests = Vec::new();
    for workers in [1, 8] {
        let mut c = t.cfg.clone();
        c.run.workers = workers;
        let run = harness::train_language(&c, &t.base, 1).map_err(|e| e.to_string())?;
        let v = run.sparse().ok_or("language vector is not sparse")?;
        let path = dir.path().join(format!("phi_w{workers}.dfts"));
        store::save_sparse(&path, v).map_err(|e| e.to_string())?;
        digests.push(sha256_hex(&std::fs::read(&path).map_err(|e| e.to_string())?));
    }
    ensure!(digests[0] == digests[1], "workers 1 vs 8: {} vs {}", digests[0], digests[1]);
    // The same job inside the transfer run used the default worker count.
    let reference = t.language_vectors[1].sparse().ok_or("missing reference vector")?;
    ensure!(sha256_hex(&store::encode_sparse(reference)) == digests[0], "differs from the transfer run's vector");
    Ok(format!("sha256 {}", &digests[0][..16]))
}

fn random_mask(seed: u64, k: usize) -> BinaryMask {
    let shapes: [(&str, usize); 3] = [("a", 40), ("b", 25), ("c", 60)];
    let mut all: Vec<(usize, usize)> = shapes.iter().enumerate().flat_map(|(t, s)| (0..s.1).map(move |i| (t, i))).collect();
    Rng::new(seed).shuffle(&mut all);
    all.truncate(k);
    all.sort_unstable();
    BinaryMask::new(
        shapes
            .iter()
            .enumerate()
            .filter_map(|(t, s)| {
                let indices: Vec<usize> = all.iter().filter(|x| x.0 == t).map(|x| x.1).collect();
                (!indices.is_empty()).then(|| MaskTensor {
                    name: s.0.into(),
                    shape: vec![s.1],
                    indices,
                })
            })
            .collect(),
    )
    .unwrap()
}

fn c11_overlap(t: &Transfer) -> Outcome {
    for pair in 0..10u64 {
        let mut rng = Rng::new(pair);
        let a = random_mask(2 * pair, 1 + rng.below(80));
        let b = random_mask(2 * pair + 1, 1 + rng.below(80));
        let (sa, sb) = (mask_set(&a), mask_set(&b));
        let expected = sa.intersection(&sb).count() as f64 / sa.len() as f64;
        let got = mask_overlap(&a, &b).map_err(|e| e.to_string())?;
        ensure!(got == expected, "pair {pair}: {got} vs {expected}");
    }
    let masks: Vec<BinaryMask> = t
        .language_vectors
        .iter()
        .map(|r| r.sparse().map(|v| v.support()).ok_or("dense language vector"))
        .collect::<Result<_, _>>()?;
    ensure!(masks.windows(2).all(|w| w[0].k() == w[1].k()), "language budgets differ");
    let m = overlap_matrix(&masks).map_err(|e| e.to_string())?;
    #[allow(clippy::needless_range_loop)]
    for i in 0..m.len() {
        for j in 0..m.len() {
            ensure!(m[i][j] == m[j][i], "matrix not symmetric at ({i}, {j})");
        }
    }
    Ok(format!(
        "10 pairs exact; language-vector overlaps A/B {:.3}, A/C {:.3}, B/C {:.3} (symmetric)",
        m[0][1], m[0][2], m[1][2]
    ))
}

fn c12_persistence(t: &Transfer) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let phi = t.language_vectors[0].sparse().ok_or("dense vector")?.clone();
    let corpus = harness::corpus(&t.cfg, 0).map_err(|e| e.to_string())?;
    let spec_digest = t.cfg.model.digest();

    let p = dir.path().join("base.dftx");
    store::save_checkpoint(&p, &t.base, spec_digest).map_err(|e| e.to_string())?;
    let (back, d) = store::load_checkpoint(&p).map_err(|e| e.to_string())?;
    ensure!(bits(&back) == bits(&t.base) && d == spec_digest && back == t.base, "checkpoint round trip");

    let delta = t.language_vectors[0].delta.clone();
    let p = dir.path().join("delta.dftd");
    store::save_delta(&p, &delta, spec_digest).map_err(|e| e.to_string())?;
    let (back, _) = store::load_delta(&p).map_err(|e| e.to_string())?;
    ensure!(bits(back.params()) == bits(delta.params()), "delta round trip");

    let p = dir.path().join("phi.dfts");
    store::save_sparse(&p, &phi).map_err(|e| e.to_string())?;
    let back = store::load_sparse(&p).map_err(|e| e.to_string())?;
    ensure!(back == phi && back.content_digest() == phi.content_digest(), "sparse round trip");
    ensure!(
        back.tensors().iter().flat_map(|t| &t.values).map(|v| v.to_bits()).eq(phi.tensors().iter().flat_map(|t| &t.values).map(|v| v.to_bits())),
        "sparse values not bitwise"
    );

    let p = dir.path().join("mask.dftm");
    store::save_mask(&p, &phi.support()).map_err(|e| e.to_string())?;
    ensure!(store::load_mask(&p).map_err(|e| e.to_string())? == phi.support(), "mask round trip");

    let p = dir.path().join("lang0.dftc");
    store::save_corpus(&p, &corpus).map_err(|e| e.to_string())?;
    ensure!(store::load_corpus(&p).map_err(|e| e.to_string())? == corpus, "corpus round trip");

    let encodings: Vec<(&str, Vec<u8>)> = vec![
        ("checkpoint", store::encode_checkpoint(&t.base, spec_digest)),
        ("delta", store::encode_delta(&delta, spec_digest)),
        ("sparse", store::encode_sparse(&phi)),
        ("mask", store::encode_mask(&phi.support())),
        ("corpus", store::encode_corpus(&corpus)),
    ];
    let mut rng = Rng::new(12);
    let mut cuts = 0;
    for (kind, bytes) in &encodings {
        for _ in 0..100 {
            let cut = rng.below(bytes.len());
            let ok = match *kind {
                "checkpoint" => store::decode_checkpoint(&bytes[..cut]).is_ok(),
                "delta" => store::decode_delta(&bytes[..cut]).is_ok(),
                "sparse" => store::decode_sparse(&bytes[..cut]).is_ok(),
                "mask" => store::decode_mask(&bytes[..cut]).is_ok(),
                _ => store::decode_corpus(&bytes[..cut]).is_ok(),
            };
            ensure!(!ok, "{kind} truncated to {cut} of {} bytes decoded", bytes.len());
            cuts += 1;
        }
    }
    // A write whose final rename fails leaves nothing behind.
    let occupied = dir.path().join("occupied");
    std::fs::create_dir(&occupied).map_err(|e| e.to_string())?;
    std::fs::write(occupied.join("keep"), b"x").map_err(|e| e.to_string())?;
    ensure!(store::save_sparse(&occupied, &phi).is_err(), "write over a non-empty directory succeeded");
    ensure!(occupied.join("keep").exists(), "directory contents changed");
    let leftovers = std::fs::read_dir(dir.path())
        .map_err(|e| e.to_string())?
        .filter(|e| e.as_ref().map(|e| e.file_name().to_string_lossy().contains(".tmp-")).unwrap_or(true))
        .count();
    ensure!(leftovers == 0, "temporary file left behind");
    Ok(format!("5 file kinds round trip bitwise; {cuts} truncations all rejected"))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match &outcome {
            Ok(d) => println!("PASS criterion {n:>2} {name}: {d}"),
            Err(d) => println!("FAIL criterion {n:>2} {name}: {d}"),
        }
        results.push((n, name, outcome));
    };

    run(1, "svd correctness", &c1_svd);
    run(2, "rank policies", &c2_rank_policy);
    run(3, "denoising identities", &c3_denoising_identities);
    run(4, "mask properties", &c4_mask_properties);
    run(6, "gradient check", &c6_gradient_check);
    run(7, "ablation equivalences", &c7_ablation_equivalences);
    run(8, "planted signal recovery", &c8_signal_recovery);

    match catch_unwind(run_transfer) {
        Ok(Ok(t)) => {
            run(5, "sparse fine-tuning freeze", &|| c5_sparse_freeze(&t.runs, &t.starts));
            run(9, "synthetic zero-shot transfer", &|| c9_transfer(&t));
            run(10, "worker-count determinism", &|| c10_determinism(&t));
            run(11, "overlap oracle", &|| c11_overlap(&t));
            run(12, "persistence", &|| c12_persistence(&t));
        }
        failed => {
            let why = match failed {
                Ok(Err(e)) => e,
                _ => "transfer experiment panicked".into(),
            };
            for (n, name) in [(5, "sparse fine-tuning freeze"), (9, "synthetic zero-shot transfer"), (10, "worker-count determinism"), (11, "overlap oracle"), (12, "persistence")] {
                run(n, name, &|| Err(format!("transfer experiment failed: {why}")));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1?}",
        results.len() - failed.len(),
        results.len(),
        started.elapsed()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
