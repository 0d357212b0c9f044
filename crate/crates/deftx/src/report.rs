//! Tab-separated result tables and overlap reports.

use std::fmt::Write as _;

use deftx_core::analysis::{jaccard_matrix, overlap_matrix, SparsityReport};
use deftx_core::deft::BinaryMask;

use crate::config::{format_rank, ExperimentConfig, Method};

/// Column schema of every results table, in order.
pub const RESULT_COLUMNS: [&str; 17] = [
    "method",
    "variant",
    "epsilon",
    "seed",
    "rank_l",
    "rank_t",
    "budget_l",
    "budget_t",
    "k_l",
    "k_t",
    "source",
    "target",
    "metric",
    "score",
    "score_without_lang",
    "majority",
    "base_digest",
];

/// One evaluated cell of a sweep or ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub variant: String,
    pub epsilon: f64,
    pub seed: u64,
    /// `none` for the undenoised baseline.
    pub rank_l: String,
    pub rank_t: String,
    pub budget_l: f64,
    pub budget_t: f64,
    pub k_l: usize,
    pub k_t: usize,
    pub source: u32,
    pub target: u32,
    pub metric: String,
    pub score: f64,
    pub score_without_lang: f64,
    pub majority: f64,
    pub base_digest: u64,
}

impl ResultRow {
    /// Config columns of a row from the configuration it was run with.
    pub fn from_config(cfg: &ExperimentConfig, target: u32) -> Self {
        let rank = |r| match cfg.run.method {
            Method::DeftX => format_rank(r),
            Method::LtSft => "none".to_string(),
        };
        Self {
            method: cfg.run.method,
            variant: cfg.run.variant.name().to_string(),
            epsilon: cfg.data.epsilon,
            seed: cfg.language.train.seed,
            rank_l: rank(cfg.language.rank),
            rank_t: rank(cfg.task.rank),
            budget_l: cfg.language.budget,
            budget_t: cfg.task.budget,
            k_l: 0,
            k_t: 0,
            source: cfg.run.source_lang,
            target,
            metric: cfg.run.eval_metric.name().to_string(),
            score: f64::NAN,
            score_without_lang: f64::NAN,
            majority: f64::NAN,
            base_digest: 0,
        }
    }

    pub fn to_tsv(&self) -> String {
        [
            self.method.name().to_string(),
            self.variant.clone(),
            self.epsilon.to_string(),
            self.seed.to_string(),
            self.rank_l.clone(),
            self.rank_t.clone(),
            self.budget_l.to_string(),
            self.budget_t.to_string(),
            self.k_l.to_string(),
            self.k_t.to_string(),
            self.source.to_string(),
            self.target.to_string(),
            self.metric.clone(),
            format!("{:.6}", self.score),
            format!("{:.6}", self.score_without_lang),
            format!("{:.6}", self.majority),
            format!("{:016x}", self.base_digest),
        ]
        .join("\t")
    }
}

pub fn results_table(rows: &[ResultRow]) -> String {
    let mut o = RESULT_COLUMNS.join("\t");
    o.push('\n');
    for r in rows {
        o.push_str(&r.to_tsv());
        o.push('\n');
    }
    o
}

const OVERLAP_HEADER: &str = "# overlap(a, b) = |support(a) & support(b)| / |support(a)| (directional); jaccard alongside";

/// Square matrices of directional overlap and Jaccard index.
pub fn overlap_tables(names: &[String], masks: &[BinaryMask]) -> deftx_core::Result<String> {
    let ov = overlap_matrix(masks)?;
    let jc = jaccard_matrix(masks)?;
    let mut o = String::new();
    let _ = writeln!(o, "{OVERLAP_HEADER}");
    for (title, m) in [("overlap", &ov), ("jaccard", &jc)] {
        let _ = writeln!(o, "{title}\t{}", names.join("\t"));
        for (name, row) in names.iter().zip(m) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(o, "{name}\t{}", cells.join("\t"));
        }
    }
    Ok(o)
}

/// Plot-ready long format: one line per ordered pair.
pub fn overlap_long(names: &[String], masks: &[BinaryMask]) -> deftx_core::Result<String> {
    let ov = overlap_matrix(masks)?;
    let jc = jaccard_matrix(masks)?;
    let mut o = String::new();
    let _ = writeln!(o, "{OVERLAP_HEADER}");
    let _ = writeln!(o, "vector_a\tvector_b\toverlap\tjaccard");
    for i in 0..names.len() {
        for j in 0..names.len() {
            let _ = writeln!(o, "{}\t{}\t{}\t{}", names[i], names[j], ov[i][j], jc[i][j]);
        }
    }
    Ok(o)
}

pub fn sparsity_table(r: &SparsityReport) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "# total support {}", r.total);
    let _ = writeln!(o, "tensor\tclass\tsize\tsupport\tmean_abs\tmax_abs");
    for t in &r.tensors {
        let _ = writeln!(o, "{}\t{}\t{}\t{}\t{:e}\t{:e}", t.name, t.class, t.size, t.support, t.mean_abs, t.max_abs);
    }
    for (layer, n) in &r.per_layer {
        let _ = writeln!(o, "# layer {layer}\t{n}");
    }
    for (class, n) in &r.per_class {
        let _ = writeln!(o, "# class {class}\t{n}");
    }
    o
}
