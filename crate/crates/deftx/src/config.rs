//! Experiment configuration: an INI-style file of `key = value` lines in
//! `[section]`s, overridable key by key from the command line.
//!
//! Every key has a default, so an empty file is a valid configuration. The
//! resolved configuration is written back out verbatim into each run's
//! manifest; floats use Rust's shortest round-trip formatting, so feeding a
//! manifest back in as `--config` reproduces the run bit for bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use deftx_core::deft::{DenoiseConfig, RankPolicy, Variant};
use deftx_core::model::{ModelSpec, TensorClass};
use deftx_core::optim::{OptimizerKind, SelectionMetric, TrainConfig};
use deftx_core::transfer::{EvalMetric, VectorJob};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("unknown config key [{section}] {key}")]
    UnknownKey { section: String, key: String },
    #[error("bad value for [{section}] {key} = {value:?}: {message}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        message: String,
    },
    #[error("override {0:?} is not of the form section.key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

/// How vectors are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Low-rank denoising before masking.
    DeftX,
    /// Plain magnitude masking of the raw delta.
    LtSft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DeftX => "deftx",
            Method::LtSft => "lt-sft",
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "deftx" => Ok(Method::DeftX),
            "lt-sft" | "ltsft" => Ok(Method::LtSft),
            _ => Err("expected deftx or lt-sft".into()),
        }
    }
}

/// Parses `100` (uniform rank) or `var:0.9` / `lin:0.9` (spectrum fraction).
pub fn parse_rank(s: &str) -> Result<RankPolicy, String> {
    let policy = if let Some(f) = s.strip_prefix("var:") {
        RankPolicy::VarianceFraction(f.parse().map_err(|e| format!("{e}"))?)
    } else if let Some(f) = s.strip_prefix("lin:") {
        RankPolicy::LinearFraction(f.parse().map_err(|e| format!("{e}"))?)
    } else {
        RankPolicy::Uniform(s.parse().map_err(|_| "expected an integer rank, var:F or lin:F".to_string())?)
    };
    policy.validate().map_err(|e| e.to_string())?;
    Ok(policy)
}

pub fn format_rank(p: RankPolicy) -> String {
    match p {
        RankPolicy::Uniform(r) => r.to_string(),
        RankPolicy::VarianceFraction(f) => format!("var:{f}"),
        RankPolicy::LinearFraction(f) => format!("lin:{f}"),
    }
}

/// Synthetic languages, corpora and the classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_languages: usize,
    pub epsilon: f64,
    pub base_seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Sentences generated per language for language-vector training.
    pub corpus_sentences: usize,
    /// Sentences of each non-source language mixed into pretraining (the
    /// source language contributes its whole corpus).
    pub pretrain_target_sentences: usize,
    pub corpus_seed: u64,
    pub mask_prob: f64,
    pub val_fraction: f64,
    pub val_batch_size: usize,
    pub n_classes: usize,
    pub markers_per_class: usize,
    pub task_seed: u64,
    pub task_train: usize,
    pub task_val: usize,
    pub task_test: usize,
    pub task_data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_languages: 3,
            epsilon: 0.5,
            base_seed: 0,
            min_len: 6,
            max_len: 16,
            corpus_sentences: 3000,
            pretrain_target_sentences: 3000,
            corpus_seed: 100,
            mask_prob: 0.15,
            val_fraction: 0.05,
            val_batch_size: 64,
            n_classes: 3,
            markers_per_class: 3,
            task_seed: 3,
            task_train: 1200,
            task_val: 240,
            task_test: 600,
            task_data_seed: 10,
        }
    }
}

/// Settings for one kind of vector (language or task).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorConfig {
    pub train: TrainConfig,
    pub budget: f64,
    pub rank: RankPolicy,
    pub retain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub variant: Variant,
    pub workers: usize,
    pub source_lang: u32,
    pub target_lang: u32,
    pub init_seed: u64,
    pub eval_metric: EvalMetric,
    pub denoise_classes: BTreeSet<TensorClass>,
}

/// Grid for `sweep`; each list is comma-separated in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub ranks_l: Vec<RankPolicy>,
    pub ranks_t: Vec<RankPolicy>,
    pub budgets_l: Vec<f64>,
    pub budgets_t: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub language: VectorConfig,
    pub task: VectorConfig,
    pub run: RunConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let lang = VectorJob::language_default();
        let task = VectorJob::task_default();
        Self {
            model: ModelSpec {
                vocab_size: 40,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 24,
                n_classes: data.n_classes,
            },
            pretrain: TrainConfig {
                lr: 3e-3,
                max_steps: 3000,
                batch_size: 16,
                eval_interval: 500,
                seed: 1,
                ..TrainConfig::default()
            },
            language: VectorConfig {
                train: TrainConfig {
                    lr: 1e-3,
                    max_steps: 400,
                    batch_size: 16,
                    eval_interval: 100,
                    ..lang.train
                },
                budget: lang.budget_fraction,
                rank: RankPolicy::VarianceFraction(0.9),
                retain: 0.05,
            },
            task: VectorConfig {
                train: TrainConfig {
                    lr: 3e-3,
                    max_steps: 400,
                    batch_size: 16,
                    eval_interval: 50,
                    ..task.train
                },
                budget: task.budget_fraction,
                rank: RankPolicy::VarianceFraction(0.9),
                retain: 0.05,
            },
            run: RunConfig {
                method: Method::DeftX,
                variant: Variant::Full,
                workers: 1,
                source_lang: 0,
                target_lang: 1,
                init_seed: 0,
                eval_metric: EvalMetric::Accuracy,
                denoise_classes: DenoiseConfig::default().denoise_classes,
            },
            sweep: SweepConfig {
                methods: vec![Method::DeftX, Method::LtSft],
                ranks_l: vec![RankPolicy::VarianceFraction(0.9)],
                ranks_t: vec![RankPolicy::VarianceFraction(0.9)],
                budgets_l: vec![lang.budget_fraction],
                budgets_t: vec![task.budget_fraction],
                epsilons: vec![data.epsilon],
                seeds: vec![0],
                targets: vec![1],
            },
            data,
        }
    }
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<T> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(item).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("list must not be empty".into());
    }
    Ok(items)
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> Option<Result<(), String>> {
    let r = match key {
        "lr" => num(v).map(|x| t.lr = x),
        "max_steps" => num(v).map(|x| t.max_steps = x),
        "batch_size" => num(v).map(|x| t.batch_size = x),
        "seed" => num(v).map(|x| t.seed = x),
        "beta1" => num(v).map(|x| t.beta1 = x),
        "beta2" => num(v).map(|x| t.beta2 = x),
        "adam_epsilon" => num(v).map(|x| t.epsilon = x),
        "weight_decay" => num(v).map(|x| t.weight_decay = x),
        "l1_lambda" => num(v).map(|x| t.l1_lambda = x),
        "eval_interval" => num(v).map(|x| t.eval_interval = x),
        "selection" => SelectionMetric::parse(v)
            .map(|x| t.selection_metric = x)
            .ok_or_else(|| "expected val_loss, accuracy or f1".to_string()),
        "optimizer" => match v {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err("expected adamw or sgd".into()),
        }
        .map(|x| t.optimizer = x),
        _ => return None,
    };
    Some(r)
}

fn write_train(out: &mut String, t: &TrainConfig) {
    let opt = match t.optimizer {
        OptimizerKind::AdamW => "adamw",
        OptimizerKind::Sgd => "sgd",
    };
    let _ = writeln!(out, "lr = {}", t.lr);
    let _ = writeln!(out, "max_steps = {}", t.max_steps);
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "seed = {}", t.seed);
    let _ = writeln!(out, "beta1 = {}", t.beta1);
    let _ = writeln!(out, "beta2 = {}", t.beta2);
    let _ = writeln!(out, "adam_epsilon = {}", t.epsilon);
    let _ = writeln!(out, "weight_decay = {}", t.weight_decay);
    let _ = writeln!(out, "l1_lambda = {}", t.l1_lambda);
    let _ = writeln!(out, "eval_interval = {}", t.eval_interval);
    let _ = writeln!(out, "selection = {}", t.selection_metric.name());
    let _ = writeln!(out, "optimizer = {opt}");
}

fn set_vector(vc: &mut VectorConfig, key: &str, v: &str) -> Option<Result<(), String>> {
    let r = match key {
        "budget" => num::<f64>(v).and_then(|x| {
            if x > 0.0 && x <= 1.0 {
                vc.budget = x;
                Ok(())
            } else {
                Err("budget must lie in (0, 1]".into())
            }
        }),
        "rank" => parse_rank(v).map(|x| vc.rank = x),
        "retain" => num(v).map(|x| vc.retain = x),
        _ => return set_train(&mut vc.train, key, v),
    };
    Some(r)
}

fn eval_metric(s: &str) -> Result<EvalMetric, String> {
    match s {
        "accuracy" => Ok(EvalMetric::Accuracy),
        "f1" => Ok(EvalMetric::MacroF1),
        _ => Err("expected accuracy or f1".into()),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_ini_str(&text).map_err(|e| match e {
            ConfigError::Read { message, .. } => ConfigError::Read {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn from_ini_str(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Read {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            if crate::manifest::MANIFEST_SECTIONS.contains(&section) {
                continue;
            }
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (lhs, value) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
        let (section, key) = lhs.trim().split_once('.').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
        self.set(section, key, value.trim())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        let result: Option<Result<(), String>> = match section {
            "model" => Some(match key {
                "vocab_size" => num(v).map(|x| self.model.vocab_size = x),
                "d_model" => num(v).map(|x| self.model.d_model = x),
                "n_layers" => num(v).map(|x| self.model.n_layers = x),
                "n_heads" => num(v).map(|x| self.model.n_heads = x),
                "d_ff" => num(v).map(|x| self.model.d_ff = x),
                "max_seq_len" => num(v).map(|x| self.model.max_seq_len = x),
                _ => return Err(self.unknown(section, key)),
            }),
            "data" => {
                let d = &mut self.data;
                Some(match key {
                    "n_languages" => num(v).map(|x| d.n_languages = x),
                    "epsilon" => num(v).map(|x| d.epsilon = x),
                    "base_seed" => num(v).map(|x| d.base_seed = x),
                    "min_len" => num(v).map(|x| d.min_len = x),
                    "max_len" => num(v).map(|x| d.max_len = x),
                    "corpus_sentences" => num(v).map(|x| d.corpus_sentences = x),
                    "pretrain_target_sentences" => num(v).map(|x| d.pretrain_target_sentences = x),
                    "corpus_seed" => num(v).map(|x| d.corpus_seed = x),
                    "mask_prob" => num(v).map(|x| d.mask_prob = x),
                    "val_fraction" => num(v).map(|x| d.val_fraction = x),
                    "val_batch_size" => num(v).map(|x| d.val_batch_size = x),
                    "n_classes" => num(v).map(|x| {
                        d.n_classes = x;
                        self.model.n_classes = x;
                    }),
                    "markers_per_class" => num(v).map(|x| d.markers_per_class = x),
                    "task_seed" => num(v).map(|x| d.task_seed = x),
                    "task_train" => num(v).map(|x| d.task_train = x),
                    "task_val" => num(v).map(|x| d.task_val = x),
                    "task_test" => num(v).map(|x| d.task_test = x),
                    "task_data_seed" => num(v).map(|x| d.task_data_seed = x),
                    _ => return Err(self.unknown(section, key)),
                })
            }
            "pretrain" => set_train(&mut self.pretrain, key, v),
            "language" => set_vector(&mut self.language, key, v),
            "task" => set_vector(&mut self.task, key, v),
            "run" => {
                let r = &mut self.run;
                Some(match key {
                    "method" => v.parse().map(|x| r.method = x),
                    "variant" => Variant::parse(v)
                        .map(|x| r.variant = x)
                        .ok_or_else(|| "expected none, no_higher_order, no_prune_no_sft or no_sft".to_string()),
                    "workers" => num::<usize>(v).and_then(|x| {
                        if x == 0 {
                            Err("workers must be >= 1".into())
                        } else {
                            r.workers = x;
                            Ok(())
                        }
                    }),
                    "source_lang" => num(v).map(|x| r.source_lang = x),
                    "target_lang" => num(v).map(|x| r.target_lang = x),
                    "init_seed" => num(v).map(|x| r.init_seed = x),
                    "eval_metric" => eval_metric(v).map(|x| r.eval_metric = x),
                    "denoise_classes" => v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| TensorClass::parse(s).ok_or_else(|| format!("unknown tensor class {s:?}")))
                        .collect::<Result<BTreeSet<_>, _>>()
                        .map(|x| r.denoise_classes = x),
                    _ => return Err(self.unknown(section, key)),
                })
            }
            "sweep" => {
                let s = &mut self.sweep;
                Some(match key {
                    "methods" => parse_list(v, |x| x.parse()).map(|x| s.methods = x),
                    "ranks_l" => parse_list(v, parse_rank).map(|x| s.ranks_l = x),
                    "ranks_t" => parse_list(v, parse_rank).map(|x| s.ranks_t = x),
                    "budgets_l" => parse_list(v, num).map(|x| s.budgets_l = x),
                    "budgets_t" => parse_list(v, num).map(|x| s.budgets_t = x),
                    "epsilons" => parse_list(v, num).map(|x| s.epsilons = x),
                    "seeds" => parse_list(v, num).map(|x| s.seeds = x),
                    "targets" => parse_list(v, num).map(|x| s.targets = x),
                    _ => return Err(self.unknown(section, key)),
                })
            }
            _ => None,
        };
        match result {
            None => Err(self.unknown(section, key)),
            Some(Ok(())) => Ok(()),
            Some(Err(message)) => Err(ConfigError::BadValue {
                section: section.into(),
                key: key.into(),
                value: value.into(),
                message,
            }),
        }
    }

    fn unknown(&self, section: &str, key: &str) -> ConfigError {
        ConfigError::UnknownKey {
            section: section.into(),
            key: key.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, t) in [("pretrain", &self.pretrain), ("language", &self.language.train), ("task", &self.task.train)] {
            t.validate().map_err(|e| ConfigError::Invalid(format!("[{name}] {e}")))?;
        }
        for vc in [&self.language, &self.task] {
            self.denoise_for(vc).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.epsilon) {
            return invalid(format!("[data] epsilon {} outside [0, 1]", d.epsilon));
        }
        if d.n_languages == 0 {
            return invalid("[data] n_languages must be >= 1".into());
        }
        if d.max_len + 1 > self.model.max_seq_len {
            return invalid(format!(
                "[data] max_len {} plus the CLS token exceeds [model] max_seq_len {}",
                d.max_len, self.model.max_seq_len
            ));
        }
        if d.val_batch_size == 0 || d.task_train == 0 || d.task_test == 0 || d.corpus_sentences == 0 {
            return invalid("[data] batch sizes and dataset sizes must be >= 1".into());
        }
        for lang in [self.run.source_lang, self.run.target_lang].into_iter().chain(self.sweep.targets.iter().copied()) {
            if lang as usize >= d.n_languages {
                return invalid(format!("language {lang} out of range for {} languages", d.n_languages));
            }
        }
        Ok(())
    }

    pub fn denoise_for(&self, vc: &VectorConfig) -> DenoiseConfig {
        DenoiseConfig {
            rank_policy: vc.rank,
            residual_retain_fraction: vc.retain,
            denoise_classes: self.run.denoise_classes.clone(),
        }
    }

    fn job(&self, vc: &VectorConfig) -> VectorJob {
        VectorJob {
            train: vc.train.clone(),
            budget_fraction: vc.budget,
            denoise: match self.run.method {
                Method::DeftX => Some(self.denoise_for(vc)),
                Method::LtSft => None,
            },
            workers: self.run.workers,
            variant: self.run.variant,
        }
    }

    pub fn language_job(&self) -> VectorJob {
        self.job(&self.language)
    }

    pub fn task_job(&self) -> VectorJob {
        self.job(&self.task)
    }

    /// The fully resolved configuration in the file format.
    pub fn to_ini_string(&self) -> String {
        let mut o = String::new();
        let m = &self.model;
        let _ = writeln!(o, "[model]");
        let _ = writeln!(o, "vocab_size = {}", m.vocab_size);
        let _ = writeln!(o, "d_model = {}", m.d_model);
        let _ = writeln!(o, "n_layers = {}", m.n_layers);
        let _ = writeln!(o, "n_heads = {}", m.n_heads);
        let _ = writeln!(o, "d_ff = {}", m.d_ff);
        let _ = writeln!(o, "max_seq_len = {}", m.max_seq_len);
        let d = &self.data;
        let _ = writeln!(o, "\n[data]");
        let _ = writeln!(o, "n_languages = {}", d.n_languages);
        let _ = writeln!(o, "epsilon = {}", d.epsilon);
        let _ = writeln!(o, "base_seed = {}", d.base_seed);
        let _ = writeln!(o, "min_len = {}", d.min_len);
        let _ = writeln!(o, "max_len = {}", d.max_len);
        let _ = writeln!(o, "corpus_sentences = {}", d.corpus_sentences);
        let _ = writeln!(o, "pretrain_target_sentences = {}", d.pretrain_target_sentences);
        let _ = writeln!(o, "corpus_seed = {}", d.corpus_seed);
        let _ = writeln!(o, "mask_prob = {}", d.mask_prob);
        let _ = writeln!(o, "val_fraction = {}", d.val_fraction);
        let _ = writeln!(o, "val_batch_size = {}", d.val_batch_size);
        let _ = writeln!(o, "n_classes = {}", d.n_classes);
        let _ = writeln!(o, "markers_per_class = {}", d.markers_per_class);
        let _ = writeln!(o, "task_seed = {}", d.task_seed);
        let _ = writeln!(o, "task_train = {}", d.task_train);
        let _ = writeln!(o, "task_val = {}", d.task_val);
        let _ = writeln!(o, "task_test = {}", d.task_test);
        let _ = writeln!(o, "task_data_seed = {}", d.task_data_seed);
        let _ = writeln!(o, "\n[pretrain]");
        write_train(&mut o, &self.pretrain);
        for (name, vc) in [("language", &self.language), ("task", &self.task)] {
            let _ = writeln!(o, "\n[{name}]");
            let _ = writeln!(o, "budget = {}", vc.budget);
            let _ = writeln!(o, "rank = {}", format_rank(vc.rank));
            let _ = writeln!(o, "retain = {}", vc.retain);
            write_train(&mut o, &vc.train);
        }
        let r = &self.run;
        let _ = writeln!(o, "\n[run]");
        let _ = writeln!(o, "method = {}", r.method.name());
        let _ = writeln!(o, "variant = {}", r.variant.name());
        let _ = writeln!(o, "workers = {}", r.workers);
        let _ = writeln!(o, "source_lang = {}", r.source_lang);
        let _ = writeln!(o, "target_lang = {}", r.target_lang);
        let _ = writeln!(o, "init_seed = {}", r.init_seed);
        let _ = writeln!(o, "eval_metric = {}", match r.eval_metric {
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::MacroF1 => "f1",
        });
        let _ = writeln!(o, "denoise_classes = {}", join(&r.denoise_classes.iter().collect::<Vec<_>>(), |c| c.name().to_string()));
        let s = &self.sweep;
        let _ = writeln!(o, "\n[sweep]");
        let _ = writeln!(o, "methods = {}", join(&s.methods, |m| m.name().to_string()));
        let _ = writeln!(o, "ranks_l = {}", join(&s.ranks_l, |r| format_rank(*r)));
        let _ = writeln!(o, "ranks_t = {}", join(&s.ranks_t, |r| format_rank(*r)));
        let _ = writeln!(o, "budgets_l = {}", join(&s.budgets_l, f64::to_string));
        let _ = writeln!(o, "budgets_t = {}", join(&s.budgets_t, f64::to_string));
        let _ = writeln!(o, "epsilons = {}", join(&s.epsilons, f64::to_string));
        let _ = writeln!(o, "seeds = {}", join(&s.seeds, u64::to_string));
        let _ = writeln!(o, "targets = {}", join(&s.targets, u32::to_string));
        o
    }
}
