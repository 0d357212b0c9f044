use deftx_core::deft::{Composable, DeltaSet, Provenance, SparseTensor, SparseVector, VectorKind};
use deftx_core::metrics::{accuracy, confusion, macro_f1};
use deftx_core::model::{init_params, Batch, Labels, ModelSpec, ParameterSet, TensorClass};
use deftx_core::optim::{SelectionMetric, TrainConfig};
use deftx_core::synthdata::{gen_corpus, gen_task_data, task_batches, ClassifyData, Language, LanguageSpec, MlmConfig, MlmData, Task, TaskSpec};
use deftx_core::transfer::{
    compose, cross_lingual, score, train_language_vector, train_task_vector, verify_chain, ComposedModel, EvalMetric, VectorJob,
};
use deftx_core::Rng;
use proptest::prelude::*;

fn spec() -> ModelSpec {
    ModelSpec {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 10,
        n_classes: 2,
    }
}

fn provenance() -> Provenance {
    Provenance {
        kind: VectorKind::Language,
        config_digest: 1,
        spec_digest: 2,
        base_digest: 3,
        init_digest: 4,
        parent: None,
    }
}

/// A sparse vector with `per_tensor` random entries in every tensor of `base`.
fn random_sparse(base: &ParameterSet, seed: u64, per_tensor: usize, dyadic: bool) -> SparseVector {
    let mut rng = Rng::new(seed);
    let tensors = base
        .iter()
        .map(|e| {
            let n = e.tensor.len();
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(per_tensor.min(n));
            idx.sort_unstable();
            let values = idx
                .iter()
                .map(|_| if dyadic { (rng.below(64) as f64 - 32.0) / 16.0 } else { rng.normal() })
                .collect();
            SparseTensor {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                indices: idx,
                values,
            }
        })
        .collect();
    SparseVector::new(tensors, provenance()).unwrap()
}

fn dyadic_base(seed: u64) -> ParameterSet {
    let mut p = init_params(&spec(), &Rng::new(seed)).unwrap();
    for i in 0..p.len() {
        for x in p.tensor_mut(i).data_mut() {
            *x = (*x * 64.0).round() / 64.0;
        }
    }
    p
}

fn bits(p: &ParameterSet) -> Vec<u64> {
    p.iter().flat_map(|e| e.tensor.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn empty_composition_is_the_base() {
    let base = init_params(&spec(), &Rng::new(0)).unwrap();
    assert_eq!(bits(&compose(&base, &[]).unwrap()), bits(&base));
}

#[test]
fn zero_vectors_are_the_identity_bitwise() {
    let mut base = init_params(&spec(), &Rng::new(0)).unwrap();
    base.tensor_mut(0).data_mut()[0] = -0.0;
    let zero_dense = Composable::Dense(DeltaSet(base.zeros_like()));
    let mut zero_sparse = random_sparse(&base, 1, 3, false);
    let tensors: Vec<SparseTensor> = zero_sparse
        .tensors()
        .iter()
        .map(|t| SparseTensor {
            values: vec![0.0; t.values.len()],
            ..t.clone()
        })
        .collect();
    zero_sparse = SparseVector::new(tensors, provenance()).unwrap();
    let out = compose(&base, &[zero_dense, Composable::Sparse(zero_sparse)]).unwrap();
    assert_eq!(bits(&out), bits(&base));
}

#[test]
fn dyadic_round_trip_recovers_the_vector() {
    let base = dyadic_base(3);
    let phi = random_sparse(&base, 4, 5, true);
    let out = compose(&base, &[Composable::Sparse(phi.clone())]).unwrap();
    let dense = phi.densify(&base).unwrap();
    for (i, e) in out.iter().enumerate() {
        for (j, (&a, &b)) in e.tensor.data().iter().zip(base.tensor(i).data()).enumerate() {
            assert_eq!(a - b, dense.params().tensor(i).data()[j]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composition_is_order_independent(seed in 0u64..10_000, n in 1usize..5) {
        let base = init_params(&spec(), &Rng::new(seed)).unwrap();
        let mut vectors: Vec<Composable> = (0..n)
            .map(|i| Composable::Sparse(random_sparse(&base, seed * 31 + i as u64, 6, false)))
            .collect();
        let mut dense = base.zeros_like();
        let mut rng = Rng::new(seed ^ 0xd);
        for i in 0..dense.len() {
            for x in dense.tensor_mut(i).data_mut() {
                *x = 1e-3 * rng.normal();
            }
        }
        vectors.push(Composable::Dense(DeltaSet(dense)));
        let forward = compose(&base, &vectors).unwrap();
        vectors.reverse();
        let backward = compose(&base, &vectors).unwrap();
        Rng::new(seed).shuffle(&mut vectors);
        let shuffled = compose(&base, &vectors).unwrap();
        prop_assert_eq!(bits(&forward), bits(&backward));
        prop_assert_eq!(bits(&forward), bits(&shuffled));
    }

    #[test]
    fn metrics_match_the_confusion_matrix(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)
    ) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&labels, &preds, 4);
        let n = labels.len() as f64;
        let diag: usize = (0..4).map(|c| cm[c][c]).sum();
        prop_assert_eq!(accuracy(&labels, &preds).unwrap(), diag as f64 / n);
        let mut f1 = 0.0;
        #[allow(clippy::needless_range_loop)]
        for c in 0..4 {
            let tp = cm[c][c] as f64;
            let predicted: f64 = (0..4).map(|r| cm[r][c] as f64).sum();
            let actual: f64 = cm[c].iter().sum::<usize>() as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { tp / actual } else { 0.0 };
            f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        prop_assert!((macro_f1(&labels, &preds, 4).unwrap() - f1 / 4.0).abs() <= 1e-12);
    }
}

#[test]
fn incompatible_vectors_are_rejected() {
    let base = init_params(&spec(), &Rng::new(0)).unwrap();
    let bad = SparseVector::new(
        vec![SparseTensor {
            name: "emb.tok".into(),
            shape: vec![3, 3],
            indices: vec![0],
            values: vec![1.0],
        }],
        provenance(),
    )
    .unwrap();
    assert!(compose(&base, &[Composable::Sparse(bad)]).is_err());
    let other = ModelSpec { d_model: 4, ..spec() };
    let other_base = init_params(&other, &Rng::new(0)).unwrap();
    assert!(compose(&base, &[Composable::Dense(DeltaSet(other_base.zeros_like()))]).is_err());
}

#[test]
fn degenerate_predictor_metrics() {
    let labels = [0, 1, 2, 0, 1, 2];
    let preds = [0; 6];
    assert!((accuracy(&labels, &preds).unwrap() - 1.0 / 3.0).abs() <= 1e-15);
    assert!((macro_f1(&labels, &preds, 3).unwrap() - 0.5 / 3.0).abs() <= 1e-15);
    assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(macro_f1(&labels, &labels, 3).unwrap(), 1.0);
    assert!(accuracy(&[], &[]).is_err());
    assert!(accuracy(&[0, 1], &[0]).is_err());
}

fn language(id: u32) -> Language {
    Language::new(LanguageSpec {
        id,
        vocab_size: 16,
        base_seed: 2,
        epsilon: 0.5,
        min_len: 4,
        max_len: 8,
    })
    .unwrap()
}

fn mlm(lang: &Language, seed: u64) -> MlmData {
    MlmData::new(&gen_corpus(lang, 100, seed).sentences, 0.1, 16, MlmConfig::default(), 16, 7)
}

fn task() -> Task {
    Task::new(TaskSpec { n_classes: 2, markers_per_class: 2, seed: 4 }, 16).unwrap()
}

fn classify(lang: &Language) -> ClassifyData {
    ClassifyData::new(&gen_task_data(lang, &task(), 48, 1), &gen_task_data(lang, &task(), 16, 2), 16)
}

fn job(budget: f64, l1: f64, selection: SelectionMetric) -> VectorJob {
    VectorJob {
        train: TrainConfig {
            lr: 5e-3,
            max_steps: 10,
            batch_size: 8,
            eval_interval: 5,
            l1_lambda: l1,
            selection_metric: selection,
            ..TrainConfig::default()
        },
        budget_fraction: budget,
        ..VectorJob::language_default()
    }
}

#[test]
fn language_vectors_have_exact_budget_and_are_deterministic() {
    let base = init_params(&spec(), &Rng::new(5)).unwrap();
    let j = job(0.03, 0.1, SelectionMetric::ValLoss);
    let a = train_language_vector(&spec(), &base, &mlm(&language(0), 1), &j).unwrap();
    let phi = a.sparse().unwrap();
    let eligible: usize = base
        .iter()
        .filter(|e| !matches!(e.class, TensorClass::Head | TensorClass::LayerNorm))
        .map(|e| e.tensor.len())
        .sum();
    assert_eq!(phi.k(), (0.03 * eligible as f64).round() as usize);
    assert!(phi.tensors().iter().all(|t| !t.name.contains("ln")));
    // Identical corpus and seed give an identical vector.
    let b = train_language_vector(&spec(), &base, &mlm(&language(0), 1), &j).unwrap();
    assert_eq!(a.vector, b.vector);
    let c = train_language_vector(&spec(), &base, &mlm(&language(1), 1), &j).unwrap();
    assert_ne!(a.vector, c.vector);
    assert!(train_language_vector(&spec(), &base, &classify(&language(0)), &j).is_err());
}

#[test]
fn zero_source_vector_equals_no_initialization() {
    let base = init_params(&spec(), &Rng::new(6)).unwrap();
    let j = job(0.05, 0.0, SelectionMetric::F1);
    let data = classify(&language(0));
    let empty = Composable::Sparse(SparseVector::new(Vec::new(), provenance()).unwrap());
    let with = train_task_vector(&spec(), &base, Some(&empty), &data, &j).unwrap();
    let without = train_task_vector(&spec(), &base, None, &data, &j).unwrap();
    assert_eq!(with.sparse().unwrap().tensors(), without.sparse().unwrap().tensors());
    assert_eq!(with.head, without.head);
    assert_eq!(with.sparse().unwrap().provenance.parent, Some(empty.digest()));
}

#[test]
fn cross_lingual_pipeline_has_a_valid_chain_and_runs() {
    let base = init_params(&spec(), &Rng::new(7)).unwrap();
    let (a, b) = (language(0), language(1));
    let out = cross_lingual(
        &spec(),
        &base,
        &mlm(&a, 1),
        &mlm(&b, 2),
        &classify(&a),
        &job(0.03, 0.1, SelectionMetric::ValLoss),
        &job(0.05, 0.0, SelectionMetric::F1),
    )
    .unwrap();
    verify_chain(&out, &base).unwrap();

    let test = gen_task_data(&b, &task(), 30, 9);
    let batches = task_batches(&test, 7);
    let params = out.composed.materialize().unwrap();
    let logits = deftx_core::model::logits(&spec(), &params, &batches[0]).unwrap();
    assert_eq!(logits.len(), batches[0].batch_size * 2);
    let s = score(&spec(), &params, &batches, EvalMetric::Accuracy).unwrap();
    assert!((0.0..=1.0).contains(&s));

    // Evaluation does not depend on how the test set is batched or ordered.
    let mut idx: Vec<usize> = (0..30).collect();
    Rng::new(3).shuffle(&mut idx);
    let shuffled = deftx_core::synthdata::TaskData {
        sentences: idx.iter().map(|&i| test.sentences[i].clone()).collect(),
        labels: idx.iter().map(|&i| test.labels[i]).collect(),
    };
    for metric in [EvalMetric::Accuracy, EvalMetric::MacroF1] {
        let x = score(&spec(), &params, &batches, metric).unwrap();
        let y = score(&spec(), &params, &task_batches(&shuffled, 11), metric).unwrap();
        assert_eq!(x, y);
    }

    // A broken chain is detected.
    let mut forged = out;
    forged.source = forged.target.clone();
    assert!(verify_chain(&forged, &base).is_err());
}

#[test]
fn materialize_overwrites_only_the_head() {
    let base = init_params(&spec(), &Rng::new(8)).unwrap();
    let head = deftx_core::model::init_head(&spec(), &Rng::new(99)).unwrap();
    let m = ComposedModel {
        base: base.clone(),
        applied: Vec::new(),
        head: Some(head.clone()),
    };
    let p = m.materialize().unwrap();
    for e in p.iter() {
        let expected = match head.get(&e.name) {
            Some(h) => h,
            None => base.get(&e.name).unwrap(),
        };
        assert_eq!(&e.tensor, expected);
    }
    let not_head = ComposedModel {
        head: Some(base.filter_classes(|c| c == TensorClass::Bias)),
        ..m
    };
    assert!(not_head.materialize().is_err());
}

#[test]
fn labels_must_be_class_labels_for_scoring() {
    let base = init_params(&spec(), &Rng::new(0)).unwrap();
    let b = Batch::from_sequences(&[vec![1, 5, 6]], Labels::Mlm(vec![0; 3]));
    assert!(score(&spec(), &base, &[b], EvalMetric::Accuracy).is_err());
    assert!(score(&spec(), &base, &[], EvalMetric::Accuracy).is_err());
}
