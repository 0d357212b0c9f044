//! Deterministic data construction and the run recipes shared by the
//! subcommands, the sweep and the tests.
//!
//! Every dataset is a pure function of the configuration and a language id,
//! so separate invocations (`train-lang`, `train-task`, ...) rebuild exactly
//! the data a single end-to-end run would use.

use deftx_core::deft::{Composable, RunOutput, SparseVector};
use deftx_core::model::{init_params, Batch, ModelSpec, ParameterSet};
use deftx_core::optim::{full_finetune, FreezeSet, TrainOutcome};
use deftx_core::synthdata::{
    gen_corpus, gen_task_data, task_batches, ClassifyData, Corpus, Language, LanguageSpec, MlmConfig, MlmData, Task, TaskData,
    TaskSpec,
};
use deftx_core::transfer::{self, cross_lingual, ComposedModel, CrossLingualOutput};
use deftx_core::Rng;

use crate::config::ExperimentConfig;

/// Test-set batches are scored in chunks of this many examples.
pub const EVAL_BATCH_SIZE: usize = 100;

pub fn language(cfg: &ExperimentConfig, id: u32) -> deftx_core::Result<Language> {
    let d = &cfg.data;
    Language::new(LanguageSpec {
        id,
        vocab_size: cfg.model.vocab_size,
        base_seed: d.base_seed,
        epsilon: d.epsilon,
        min_len: d.min_len,
        max_len: d.max_len,
    })
}

pub fn corpus(cfg: &ExperimentConfig, id: u32) -> deftx_core::Result<Corpus> {
    Ok(gen_corpus(&language(cfg, id)?, cfg.data.corpus_sentences, cfg.data.corpus_seed + id as u64))
}

fn mlm_config(cfg: &ExperimentConfig) -> MlmConfig {
    MlmConfig {
        mask_prob: cfg.data.mask_prob,
        ..MlmConfig::default()
    }
}

/// Mixed-language MLM data: the whole source corpus plus a prefix of every
/// other language's corpus, shuffled.
pub fn pretrain_data(cfg: &ExperimentConfig, corpora: &[Corpus]) -> MlmData {
    let mut mixed = Vec::new();
    for c in corpora {
        let n = if c.language_id == cfg.run.source_lang {
            c.sentences.len()
        } else {
            cfg.data.pretrain_target_sentences.min(c.sentences.len())
        };
        mixed.extend(c.sentences[..n].iter().cloned());
    }
    Rng::new(Rng::derive(cfg.pretrain.seed, 0x5bff)).shuffle(&mut mixed);
    let d = &cfg.data;
    MlmData::new(&mixed, d.val_fraction, d.val_batch_size, mlm_config(cfg), cfg.model.vocab_size, cfg.pretrain.seed)
}

pub fn all_corpora(cfg: &ExperimentConfig) -> deftx_core::Result<Vec<Corpus>> {
    (0..cfg.data.n_languages as u32).map(|id| corpus(cfg, id)).collect()
}

/// Pretrains the base model from a seeded initialization.
pub fn pretrain(cfg: &ExperimentConfig) -> deftx_core::Result<TrainOutcome> {
    let corpora = all_corpora(cfg)?;
    pretrain_from(cfg, &corpora)
}

pub fn pretrain_from(cfg: &ExperimentConfig, corpora: &[Corpus]) -> deftx_core::Result<TrainOutcome> {
    let data = pretrain_data(cfg, corpora);
    let init = init_params(&cfg.model, &Rng::new(cfg.run.init_seed))?;
    full_finetune(&cfg.model, &init, &data, &cfg.pretrain, &FreezeSet::none())
}

/// MLM data for language-vector training on one language.
pub fn language_data(cfg: &ExperimentConfig, id: u32) -> deftx_core::Result<MlmData> {
    let c = corpus(cfg, id)?;
    let d = &cfg.data;
    Ok(MlmData::new(
        &c.sentences,
        d.val_fraction,
        d.val_batch_size,
        mlm_config(cfg),
        cfg.model.vocab_size,
        Rng::derive(cfg.language.train.seed, id as u64),
    ))
}

pub fn task(cfg: &ExperimentConfig) -> deftx_core::Result<Task> {
    Task::new(
        TaskSpec {
            n_classes: cfg.data.n_classes,
            markers_per_class: cfg.data.markers_per_class,
            seed: cfg.data.task_seed,
        },
        cfg.model.vocab_size,
    )
}

/// Labeled training and validation data in the source language.
pub fn task_data(cfg: &ExperimentConfig) -> deftx_core::Result<ClassifyData> {
    let lang = language(cfg, cfg.run.source_lang)?;
    let t = task(cfg)?;
    let d = &cfg.data;
    let train = gen_task_data(&lang, &t, d.task_train, d.task_data_seed);
    let val = gen_task_data(&lang, &t, d.task_val.max(1), Rng::derive(d.task_data_seed, 0x7a1));
    Ok(ClassifyData::new(&train, &val, d.val_batch_size))
}

/// Held-out labeled data in language `id`.
pub fn test_data(cfg: &ExperimentConfig, id: u32) -> deftx_core::Result<TaskData> {
    let d = &cfg.data;
    Ok(gen_task_data(
        &language(cfg, id)?,
        &task(cfg)?,
        d.task_test,
        Rng::derive(d.task_data_seed, 0x7e57_0000 + id as u64),
    ))
}

pub fn test_batches(cfg: &ExperimentConfig, id: u32) -> deftx_core::Result<Vec<Batch>> {
    Ok(task_batches(&test_data(cfg, id)?, EVAL_BATCH_SIZE))
}

pub fn train_language(cfg: &ExperimentConfig, base: &ParameterSet, id: u32) -> deftx_core::Result<RunOutput> {
    transfer::train_language_vector(&cfg.model, base, &language_data(cfg, id)?, &cfg.language_job())
}

pub fn train_task(cfg: &ExperimentConfig, base: &ParameterSet, source: Option<&Composable>) -> deftx_core::Result<RunOutput> {
    transfer::train_task_vector(&cfg.model, base, source, &task_data(cfg)?, &cfg.task_job())
}

/// Source vector, task vector on top of it, and the target vector.
pub fn cross_lingual_run(cfg: &ExperimentConfig, base: &ParameterSet) -> deftx_core::Result<CrossLingualOutput> {
    let src = language_data(cfg, cfg.run.source_lang)?;
    let tar = language_data(cfg, cfg.run.target_lang)?;
    let out = cross_lingual(&cfg.model, base, &src, &tar, &task_data(cfg)?, &cfg.language_job(), &cfg.task_job())?;
    transfer::verify_chain(&out, base)?;
    Ok(out)
}

/// Fraction of the most frequent test label.
pub fn majority_baseline(test: &TaskData, n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes];
    for &y in &test.labels {
        counts[y] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / test.labels.len().max(1) as f64
}

/// The composed model without any language vector.
pub fn without_language(out: &CrossLingualOutput) -> ComposedModel {
    ComposedModel {
        base: out.composed.base.clone(),
        applied: vec![out.task.vector.clone()],
        head: out.task.head.clone(),
    }
}

pub fn spec_digest(spec: &ModelSpec) -> u64 {
    spec.digest()
}

pub fn sparse_or_none(c: &Composable) -> Option<&SparseVector> {
    match c {
        Composable::Sparse(v) => Some(v),
        Composable::Dense(_) => None,
    }
}
