//! End-to-end transfer cells and the configuration grid over them.

use anyhow::Result;

use deftx_core::deft::{Composable, RunOutput};
use deftx_core::model::ParameterSet;
use deftx_core::transfer::{score, ComposedModel, CrossLingualOutput};

use crate::config::{ExperimentConfig, Method};
use crate::harness;
use crate::report::ResultRow;

fn k_of(run: &RunOutput) -> usize {
    match &run.vector {
        Composable::Sparse(v) => v.k(),
        Composable::Dense(d) => d.params().scalar_count(),
    }
}

fn evaluate(cfg: &ExperimentConfig, out: &CrossLingualOutput, composed: &ParameterSet, target: u32) -> Result<ResultRow> {
    let test = harness::test_data(cfg, target)?;
    let batches = harness::test_batches(cfg, target)?;
    let metric = cfg.run.eval_metric;
    let without = harness::without_language(out).materialize()?;
    let mut row = ResultRow::from_config(cfg, target);
    row.k_l = k_of(&out.target);
    row.k_t = k_of(&out.task);
    row.score = score(&cfg.model, composed, &batches, metric)?;
    row.score_without_lang = score(&cfg.model, &without, &batches, metric)?;
    row.majority = harness::majority_baseline(&test, cfg.data.n_classes);
    row.base_digest = out.composed.base.digest();
    Ok(row)
}

/// The full cross-lingual recipe for `cfg.run.target_lang`; `save` receives
/// the composed parameters before evaluation.
pub fn run_cell(cfg: &ExperimentConfig, base: &ParameterSet, save: impl FnOnce(&ParameterSet) -> Result<()>) -> Result<ResultRow> {
    let out = harness::cross_lingual_run(cfg, base)?;
    let composed = out.composed.materialize()?;
    save(&composed)?;
    evaluate(cfg, &out, &composed, cfg.run.target_lang)
}

/// One source/task pair shared by several targets; target-language jobs
/// run concurrently. Each job is deterministic, so the rows equal those of
/// separate [`run_cell`] calls.
pub fn run_targets(cfg: &ExperimentConfig, base: &ParameterSet, targets: &[u32]) -> Result<Vec<ResultRow>> {
    let source = harness::train_language(cfg, base, cfg.run.source_lang)?;
    let task = harness::train_task(cfg, base, Some(&source.vector))?;
    let target_runs: Vec<deftx_core::Result<RunOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = targets
            .iter()
            .map(|&t| s.spawn(move || harness::train_language(cfg, base, t)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("target job panicked")).collect()
    });
    let mut rows = Vec::with_capacity(targets.len());
    for (&t, target) in targets.iter().zip(target_runs) {
        let target = target?;
        let out = CrossLingualOutput {
            composed: ComposedModel {
                base: base.clone(),
                applied: vec![task.vector.clone(), target.vector.clone()],
                head: task.head.clone(),
            },
            source: source.clone(),
            task: task.clone(),
            target,
        };
        deftx_core::transfer::verify_chain(&out, base)?;
        let composed = out.composed.materialize()?;
        let mut c = cfg.clone();
        c.run.target_lang = t;
        rows.push(evaluate(&c, &out, &composed, t)?);
    }
    Ok(rows)
}

/// Cells of the grid, in row order: ε, seed, method, rank_l, rank_t,
/// budget_l, budget_t. The undenoised baseline ignores the rank axes.
pub fn cells(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &eps in &s.epsilons {
        for &seed in &s.seeds {
            for &method in &s.methods {
                let (ranks_l, ranks_t) = match method {
                    Method::DeftX => (s.ranks_l.clone(), s.ranks_t.clone()),
                    Method::LtSft => (vec![cfg.language.rank], vec![cfg.task.rank]),
                };
                for &rl in &ranks_l {
                    for &rt in &ranks_t {
                        for &bl in &s.budgets_l {
                            for &bt in &s.budgets_t {
                                let mut c = cfg.clone();
                                c.data.epsilon = eps;
                                c.language.train.seed = seed;
                                c.task.train.seed = seed;
                                c.run.method = method;
                                c.language.rank = rl;
                                c.task.rank = rt;
                                c.language.budget = bl;
                                c.task.budget = bt;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs every cell against every configured target; the base model is
/// pretrained once per ε.
pub fn sweep(cfg: &ExperimentConfig, mut on_row: impl FnMut(&ResultRow)) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let mut base: Option<(f64, ParameterSet)> = None;
    for cell in cells(cfg) {
        if base.as_ref().map(|(e, _)| *e) != Some(cell.data.epsilon) {
            log::info!("pretraining base model for epsilon {}", cell.data.epsilon);
            base = Some((cell.data.epsilon, harness::pretrain(&cell)?.params));
        }
        let (_, theta0) = base.as_ref().expect("set above");
        for row in run_targets(&cell, theta0, &cfg.sweep.targets)? {
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
