//! Subcommand front end. Every subcommand rebuilds its data from the
//! configuration, so a chain of single-step commands reproduces an
//! end-to-end run bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use deftx_core::analysis::sparsity_report;
use deftx_core::deft::{Composable, RunOutput, Variant};
use deftx_core::model::ParameterSet;
use deftx_core::transfer::{score, ComposedModel, EvalMetric};
use deftx_core::Error as CoreError;

use crate::config::{parse_rank, ConfigError, ExperimentConfig, Method};
use crate::harness;
use crate::manifest::Manifest;
use crate::report::{self, ResultRow};
use crate::store::{self, StoreError};

/// Distinct process exit codes per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const FORMAT: i32 = 5;
    pub const INCOMPATIBLE: i32 = 6;
    pub const TRAINING: i32 = 7;
}

/// Bad or conflicting command-line usage.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Maps an error chain to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return exit::USAGE;
        }
        if cause.is::<ConfigError>() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<clap::Error>() {
            return e.exit_code();
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return match e {
                StoreError::Io { .. } => exit::IO,
                StoreError::Format { .. } | StoreError::Validation { .. } => exit::FORMAT,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) | CoreError::Budget { .. } => exit::CONFIG,
                CoreError::Incompatible(_) | CoreError::Dimensionality { .. } => exit::INCOMPATIBLE,
                CoreError::TrainingFailure { .. } | CoreError::NonFinite { .. } | CoreError::EmptyObjective => exit::TRAINING,
                _ => exit::INTERNAL,
            };
        }
    }
    exit::INTERNAL
}

#[derive(Debug, Parser)]
#[command(name = "deftx", version, about = "Sparse composable fine-tuning with low-rank denoising on synthetic languages")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file (INI sections of key = value); a run manifest works too.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Applied after the file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Threads for per-matrix SVD work (results do not depend on it).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log level: error, warn, info, debug.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
}

/// Flags shared by the vector-producing commands.
#[derive(Debug, Args, Default)]
pub struct VectorFlags {
    /// deftx or lt-sft.
    #[arg(long)]
    pub method: Option<Method>,
    /// Ablation variant: none, no_higher_order, no_prune_no_sft, no_sft.
    #[arg(long)]
    pub variant: Option<String>,
    /// Language-vector rank: an integer, var:F (σ² fraction) or lin:F.
    #[arg(long)]
    pub rank_l: Option<String>,
    /// Task-vector rank, same syntax as --rank-l.
    #[arg(long)]
    pub rank_t: Option<String>,
    /// Language-vector budget as a fraction of trainable scalars.
    #[arg(long)]
    pub budget_l: Option<f64>,
    /// Task-vector budget as a fraction of trainable scalars.
    #[arg(long)]
    pub budget_t: Option<f64>,
    /// Training seed for both vector kinds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base model on the mixed-language synthetic corpus.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Also write each language's corpus here.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
    },
    /// Produce a language vector.
    TrainLang {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        lang: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[command(flatten)]
        flags: VectorFlags,
    },
    /// Produce a task vector and its classification head.
    TrainTask {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        source_lang_vector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        head_out: PathBuf,
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[command(flatten)]
        flags: VectorFlags,
    },
    /// Add vectors to a base checkpoint (and install a head).
    Compose {
        #[arg(long)]
        base: PathBuf,
        /// Sparse or dense vector files.
        vectors: Vec<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot metric of a checkpoint on a language's test set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lang: u32,
        /// accuracy or f1.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise support overlap of vector files.
    Overlap {
        #[arg(num_args = 2..)]
        vectors: Vec<PathBuf>,
        /// Long-format output (vector_a, vector_b, overlap, jaccard).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Support counts per tensor, layer and class of one sparse vector.
    Sparsity {
        #[arg(long)]
        base: PathBuf,
        vector: PathBuf,
    },
    /// Run one ablation variant end to end and write the composed model.
    Ablate {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        target: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        flags: VectorFlags,
    },
    /// Config-driven grid over method, ranks, budgets, ε and seeds.
    Sweep {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::TrainLang { .. } => "train-lang",
            Command::TrainTask { .. } => "train-task",
            Command::Compose { .. } => "compose",
            Command::Eval { .. } => "eval",
            Command::Overlap { .. } => "overlap",
            Command::Sparsity { .. } => "sparsity",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return usage("--workers must be >= 1");
        }
        cfg.run.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_vector_flags(cfg: &mut ExperimentConfig, f: &VectorFlags) -> Result<()> {
    if let Some(m) = f.method {
        cfg.run.method = m;
    }
    if cfg.run.method == Method::LtSft && (f.rank_l.is_some() || f.rank_t.is_some()) {
        return usage("--rank-l/--rank-t have no effect with --method lt-sft");
    }
    if let Some(v) = &f.variant {
        cfg.run.variant = Variant::parse(v).ok_or_else(|| UsageError(format!("unknown variant {v:?}")))?;
    }
    if cfg.run.method == Method::LtSft && cfg.run.variant != Variant::Full {
        return usage("ablation variants apply to --method deftx only");
    }
    if let Some(r) = &f.rank_l {
        cfg.language.rank = parse_rank(r).map_err(|e| UsageError(format!("--rank-l {r}: {e}")))?;
    }
    if let Some(r) = &f.rank_t {
        cfg.task.rank = parse_rank(r).map_err(|e| UsageError(format!("--rank-t {r}: {e}")))?;
    }
    for (flag, value, slot) in [("--budget-l", f.budget_l, &mut cfg.language.budget), ("--budget-t", f.budget_t, &mut cfg.task.budget)] {
        if let Some(b) = value {
            if !(b > 0.0 && b <= 1.0) {
                return usage(format!("{flag} must lie in (0, 1]"));
            }
            *slot = b;
        }
    }
    if let Some(s) = f.seed {
        cfg.language.train.seed = s;
        cfg.task.train.seed = s;
    }
    cfg.validate()?;
    Ok(())
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(StoreError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist"),
        }
        .into());
    }
    Ok(())
}

/// Loads a checkpoint and checks it was saved for the configured model.
fn load_base(cfg: &ExperimentConfig, path: &Path) -> Result<ParameterSet> {
    require_input(path)?;
    let (params, digest) = store::load_checkpoint(path)?;
    if digest != cfg.model.digest() {
        return Err(CoreError::Incompatible(format!(
            "{} was saved for model spec {digest:016x}, configuration describes {:016x}",
            path.display(),
            cfg.model.digest()
        )))
        .context("loading base checkpoint");
    }
    Ok(params)
}

pub fn load_vector(path: &Path) -> Result<Composable> {
    require_input(path)?;
    let bytes = store::read_file(path)?;
    let v = match store::sniff(&bytes).as_ref() {
        Some(m) if m == store::SPARSE_MAGIC => Composable::Sparse(store::decode_sparse(&bytes)?),
        Some(m) if m == store::DELTA_MAGIC => Composable::Dense(store::decode_delta(&bytes)?.0),
        _ => {
            return Err(StoreError::Format {
                offset: 0,
                message: format!("{} is neither a sparse nor a dense vector file", path.display()),
            }
            .into())
        }
    };
    Ok(v)
}

fn save_vector(path: &Path, v: &Composable, spec_digest: u64) -> Result<()> {
    match v {
        Composable::Sparse(s) => store::save_sparse(path, s)?,
        Composable::Dense(d) => store::save_delta(path, d, spec_digest)?,
    }
    Ok(())
}

fn check_vector_against(v: &Composable, base: &ParameterSet, spec_digest: u64, path: &Path) -> Result<()> {
    if let Composable::Sparse(s) = v {
        let p = &s.provenance;
        if p.spec_digest != spec_digest || p.base_digest != base.digest() {
            return Err(CoreError::Incompatible(format!(
                "{} was trained for a different base model or spec",
                path.display()
            ))
            .into());
        }
    }
    Ok(())
}

fn save_run_vector(
    cfg: &ExperimentConfig,
    out: &RunOutput,
    path: &Path,
    mask_out: Option<&PathBuf>,
    manifest: &mut Manifest,
) -> Result<()> {
    let spec_digest = cfg.model.digest();
    save_vector(path, &out.vector, spec_digest)?;
    manifest.output("vector", path)?;
    manifest.digest("vector", out.vector.digest());
    match (mask_out, &out.mask) {
        (Some(m), Some(mask)) => {
            store::save_mask(m, mask)?;
            manifest.output("mask", m)?;
        }
        (Some(_), None) => return usage("--mask-out given but this variant produces a dense vector"),
        _ => {}
    }
    for r in &out.ranks {
        manifest.digests.push((format!("rank.{}", r.name), r.rank.to_string()));
    }
    Ok(())
}

fn support_label(run: &RunOutput) -> String {
    match &run.vector {
        Composable::Sparse(v) => v.k().to_string(),
        Composable::Dense(_) => "dense".into(),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `stdout`.
pub fn run_args<I, S>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args)?;
    let raw: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    run(cli, &raw, stdout)
}

/// Runs a parsed command; `raw_args` are recorded in the manifest.
pub fn run(cli: Cli, raw_args: &[String], stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    let mut manifest = Manifest::new(cli.command.name(), raw_args);
    manifest.digest("model_spec", cfg.model.digest());
    if let Some(c) = &cli.common.config {
        manifest.input("config", c)?;
    }
    match &cli.command {
        Command::Pretrain { out, corpus_dir } => {
            let corpora = harness::all_corpora(&cfg)?;
            if let Some(dir) = corpus_dir {
                for c in &corpora {
                    let p = dir.join(format!("lang{}.dftc", c.language_id));
                    store::save_corpus(&p, c)?;
                    manifest.output(&format!("corpus{}", c.language_id), &p)?;
                }
            }
            let outcome = harness::pretrain_from(&cfg, &corpora)?;
            info!("pretraining finished; best step {} metric {:?}", outcome.best_step, outcome.best_metric);
            store::save_checkpoint(out, &outcome.params, cfg.model.digest())?;
            manifest.output("checkpoint", out)?;
            manifest.digest("checkpoint", outcome.params.digest());
            manifest.write_for(out, &cfg)?;
            writeln!(stdout, "pretrained\t{}\tbest_step={}\tval_loss={:?}", out.display(), outcome.best_step, outcome.best_metric)?;
        }
        Command::TrainLang {
            base,
            lang,
            out,
            mask_out,
            flags,
        } => {
            apply_vector_flags(&mut cfg, flags)?;
            if *lang as usize >= cfg.data.n_languages {
                return usage(format!("--lang {lang} out of range for {} languages", cfg.data.n_languages));
            }
            let theta0 = load_base(&cfg, base)?;
            manifest.input("base", base)?;
            let run = harness::train_language(&cfg, &theta0, *lang)?;
            save_run_vector(&cfg, &run, out, mask_out.as_ref(), &mut manifest)?;
            manifest.write_for(out, &cfg)?;
            writeln!(stdout, "language-vector\t{}\tlang={lang}\tk={}", out.display(), support_label(&run))?;
        }
        Command::TrainTask {
            base,
            source_lang_vector,
            out,
            head_out,
            mask_out,
            flags,
        } => {
            apply_vector_flags(&mut cfg, flags)?;
            let theta0 = load_base(&cfg, base)?;
            manifest.input("base", base)?;
            let source = match source_lang_vector {
                Some(p) => {
                    let v = load_vector(p)?;
                    check_vector_against(&v, &theta0, cfg.model.digest(), p)?;
                    manifest.input("source_lang_vector", p)?;
                    Some(v)
                }
                None => None,
            };
            let run = harness::train_task(&cfg, &theta0, source.as_ref())?;
            save_run_vector(&cfg, &run, out, mask_out.as_ref(), &mut manifest)?;
            let head = run.head.as_ref().context("task training produced no head")?;
            store::save_checkpoint(head_out, head, cfg.model.digest())?;
            manifest.output("head", head_out)?;
            manifest.write_for(out, &cfg)?;
            writeln!(stdout, "task-vector\t{}\thead={}\tk={}", out.display(), head_out.display(), support_label(&run))?;
        }
        Command::Compose { base, vectors, head, out } => {
            require_input(base)?;
            let (theta0, spec_digest) = store::load_checkpoint(base)?;
            manifest.input("base", base)?;
            let mut applied = Vec::new();
            for (i, p) in vectors.iter().enumerate() {
                let v = load_vector(p)?;
                check_vector_against(&v, &theta0, spec_digest, p)?;
                manifest.input(&format!("vector{i}"), p)?;
                applied.push(v);
            }
            let head = match head {
                Some(p) => {
                    require_input(p)?;
                    let (h, d) = store::load_checkpoint(p)?;
                    if d != spec_digest {
                        return Err(CoreError::Incompatible(format!("head {} belongs to another model spec", p.display())).into());
                    }
                    manifest.input("head", p)?;
                    Some(h)
                }
                None => None,
            };
            let composed = ComposedModel {
                base: theta0,
                applied,
                head,
            }
            .materialize()?;
            store::save_checkpoint(out, &composed, spec_digest)?;
            manifest.output("checkpoint", out)?;
            manifest.write_for(out, &cfg)?;
            writeln!(stdout, "composed\t{}\tvectors={}", out.display(), vectors.len())?;
        }
        Command::Eval { model, lang, metric, out } => {
            if let Some(m) = metric {
                cfg.run.eval_metric = match m.as_str() {
                    "accuracy" => EvalMetric::Accuracy,
                    "f1" => EvalMetric::MacroF1,
                    _ => return usage(format!("unknown metric {m:?}; expected accuracy or f1")),
                };
            }
            if *lang as usize >= cfg.data.n_languages {
                return usage(format!("--lang {lang} out of range for {} languages", cfg.data.n_languages));
            }
            let params = load_base(&cfg, model)?;
            let test = harness::test_data(&cfg, *lang)?;
            let batches = harness::test_batches(&cfg, *lang)?;
            let s = score(&cfg.model, &params, &batches, cfg.run.eval_metric)?;
            let majority = harness::majority_baseline(&test, cfg.data.n_classes);
            let line = format!("{}\t{lang}\t{}\t{s:.6}\t{majority:.6}", model.display(), cfg.run.eval_metric.name());
            writeln!(stdout, "{line}")?;
            if let Some(o) = out {
                manifest.input("model", model)?;
                store::write_atomic(o, format!("model\tlang\tmetric\tscore\tmajority\n{line}\n").as_bytes())?;
                manifest.output("results", o)?;
                manifest.write_for(o, &cfg)?;
            }
        }
        Command::Overlap { vectors, out } => {
            let mut masks = Vec::new();
            let mut names = Vec::new();
            for p in vectors {
                let support = match load_vector(p)? {
                    Composable::Sparse(s) => s.support(),
                    Composable::Dense(_) => return usage(format!("{} is dense; overlap needs sparse vectors", p.display())),
                };
                names.push(p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
                masks.push(support);
            }
            write!(stdout, "{}", report::overlap_tables(&names, &masks)?)?;
            if let Some(o) = out {
                for (i, p) in vectors.iter().enumerate() {
                    manifest.input(&format!("vector{i}"), p)?;
                }
                store::write_atomic(o, report::overlap_long(&names, &masks)?.as_bytes())?;
                manifest.output("overlap", o)?;
                manifest.write_for(o, &cfg)?;
            }
        }
        Command::Sparsity { base, vector } => {
            require_input(base)?;
            let (theta0, _) = store::load_checkpoint(base)?;
            let Composable::Sparse(v) = load_vector(vector)? else {
                return usage("sparsity needs a sparse vector");
            };
            write!(stdout, "{}", report::sparsity_table(&sparsity_report(&v, &theta0)?))?;
        }
        Command::Ablate {
            base,
            target,
            out,
            results,
            flags,
        } => {
            apply_vector_flags(&mut cfg, flags)?;
            if let Some(t) = target {
                cfg.run.target_lang = *t;
                cfg.validate()?;
            }
            let theta0 = match base {
                Some(p) => {
                    let b = load_base(&cfg, p)?;
                    manifest.input("base", p)?;
                    b
                }
                None => harness::pretrain(&cfg)?.params,
            };
            let row = crate::sweep::run_cell(&cfg, &theta0, |composed| {
                store::save_checkpoint(out, composed, cfg.model.digest())?;
                Ok(())
            })?;
            manifest.output("checkpoint", out)?;
            let table = report::results_table(std::slice::from_ref(&row));
            if let Some(r) = results {
                store::write_atomic(r, table.as_bytes())?;
                manifest.output("results", r)?;
            }
            manifest.write_for(out, &cfg)?;
            write!(stdout, "{table}")?;
        }
        Command::Sweep { out } => {
            let rows = crate::sweep::sweep(&cfg, |row: &ResultRow| {
                info!("{}", row.to_tsv());
            })?;
            let table = report::results_table(&rows);
            store::write_atomic(out, table.as_bytes())?;
            manifest.output("results", out)?;
            manifest.write_for(out, &cfg)?;
            write!(stdout, "{table}")?;
        }
    }
    Ok(())
}
