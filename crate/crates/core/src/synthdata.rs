//! Synthetic languages (bigram Markov chains over a shared vocabulary),
//! a marker-token classification task, and MLM corruption.
//!
//! Token ids below [`FIRST_CONTENT_TOKEN`] are reserved (`PAD`, `CLS`,
//! `MASK`); chains and markers only use content tokens. Every sentence
//! handed to the model starts with `CLS`.

use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::model::{Batch, Labels, Objective, CLS_TOKEN, FIRST_CONTENT_TOKEN, IGNORE, MASK_TOKEN, PAD_TOKEN};
use crate::optim::{sample_indices, DataSource};
use crate::{Error, Result, Rng};

/// Spread of the log-normal row weights; larger means peakier chains.
const ROW_PEAKEDNESS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    pub id: u32,
    pub vocab_size: usize,
    /// Seed of the chain shared by all languages.
    pub base_seed: u64,
    /// Interpolation toward the language-unique chain, in `[0, 1]`.
    pub epsilon: f64,
    /// Inclusive sentence-length bounds (content tokens, CLS excluded).
    pub min_len: usize,
    pub max_len: usize,
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT_TOKEN as usize + 1 {
            return Err(Error::Config("vocab_size leaves fewer than two content tokens".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence lengths [{}, {}] invalid",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab_size - FIRST_CONTENT_TOKEN as usize
    }
}

/// Normalized transition rows over content tokens (`rows[a][b] = P(b | a)`),
/// plus the start distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    pub spec: LanguageSpec,
    pub start: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

fn random_rows(seed: u64, n_rows: usize, n: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n_rows)
        .map(|_| {
            let w: Vec<f64> = (0..n).map(|_| libm::exp(ROW_PEAKEDNESS * rng.normal())).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn mix_rows(base: &[Vec<f64>], unique: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    base.iter()
        .zip(unique)
        .map(|(b, u)| {
            if eps == 0.0 {
                return b.clone();
            }
            let row: Vec<f64> = b.iter().zip(u).map(|(x, y)| (1.0 - eps) * x + eps * y).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

impl Language {
    pub fn new(spec: LanguageSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.content_tokens();
        // Row 0 is the start distribution, rows 1.. are transitions.
        let base = random_rows(Rng::derive(spec.base_seed, 0xba5e), n + 1, n);
        let unique = random_rows(Rng::derive(spec.base_seed, 0x1a9 + spec.id as u64), n + 1, n);
        let mut mixed = mix_rows(&base, &unique, spec.epsilon);
        let start = mixed.remove(0);
        Ok(Self { spec, start, rows: mixed })
    }

    fn row_for(&self, prev: Option<u32>) -> &[f64] {
        match prev {
            None => &self.start,
            Some(t) => &self.rows[(t - FIRST_CONTENT_TOKEN) as usize],
        }
    }

    /// One sentence of content tokens (no CLS).
    pub fn sample_sentence(&self, rng: &mut Rng) -> Vec<u32> {
        let span = self.spec.max_len - self.spec.min_len + 1;
        let len = self.spec.min_len + rng.below(span);
        let mut out = Vec::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let t = rng.categorical(self.row_for(prev)) as u32 + FIRST_CONTENT_TOKEN;
            out.push(t);
            prev = Some(t);
        }
        out
    }
}

/// Sentences of content tokens from one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub language_id: u32,
    pub seed: u64,
    pub sentences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

pub fn gen_corpus(lang: &Language, n_sentences: usize, seed: u64) -> Corpus {
    let mut rng = Rng::new(Rng::derive(seed, 0xc0));
    Corpus {
        vocab_size: lang.spec.vocab_size,
        language_id: lang.spec.id,
        seed,
        sentences: (0..n_sentences).map(|_| lang.sample_sentence(&mut rng)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub markers_per_class: usize,
    pub seed: u64,
}

/// A task with concrete, disjoint marker sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub markers: Vec<Vec<u32>>,
}

impl Task {
    pub fn new(spec: TaskSpec, vocab_size: usize) -> Result<Self> {
        let content = vocab_size.saturating_sub(FIRST_CONTENT_TOKEN as usize);
        if spec.n_classes < 2 || spec.markers_per_class == 0 {
            return Err(Error::Config("task needs >= 2 classes and >= 1 marker per class".into()));
        }
        if spec.n_classes * spec.markers_per_class >= content {
            return Err(Error::Config(format!(
                "{} marker tokens do not fit in {content} content tokens",
                spec.n_classes * spec.markers_per_class
            )));
        }
        let mut pool: Vec<u32> = (FIRST_CONTENT_TOKEN..vocab_size as u32).collect();
        Rng::new(Rng::derive(spec.seed, 0x7a5c)).shuffle(&mut pool);
        let markers = (0..spec.n_classes)
            .map(|c| {
                let mut m = pool[c * spec.markers_per_class..(c + 1) * spec.markers_per_class].to_vec();
                m.sort_unstable();
                m
            })
            .collect();
        Ok(Self { spec, markers })
    }

    pub fn marker_class(&self, token: u32) -> Option<usize> {
        self.markers.iter().position(|m| m.binary_search(&token).is_ok())
    }

    /// Class whose markers occur strictly most often; `None` on ties or no markers.
    pub fn label(&self, sentence: &[u32]) -> Option<usize> {
        let mut counts = vec![0usize; self.spec.n_classes];
        for &t in sentence {
            if let Some(c) = self.marker_class(t) {
                counts[c] += 1;
            }
        }
        let max = *counts.iter().max()?;
        if max == 0 || counts.iter().filter(|&&c| c == max).count() > 1 {
            return None;
        }
        counts.iter().position(|&c| c == max)
    }
}

/// Labeled sentences (content tokens, no CLS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskData {
    pub sentences: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

/// Balanced labeled data: each sentence is drawn from the language's chain,
/// then class markers are written in (chosen through the same chain) until
/// the labeling rule yields the intended class.
pub fn gen_task_data(lang: &Language, task: &Task, n_examples: usize, seed: u64) -> TaskData {
    let mut rng = Rng::new(Rng::derive(seed, 0x7a));
    let c = task.spec.n_classes;
    let mut labels: Vec<usize> = (0..n_examples).map(|i| i % c).collect();
    rng.shuffle(&mut labels);
    let mut sentences = Vec::with_capacity(n_examples);
    for &y in &labels {
        let mut s = lang.sample_sentence(&mut rng);
        while task.label(&s) != Some(y) {
            let candidates: Vec<usize> = (0..s.len()).filter(|&p| task.marker_class(s[p]) != Some(y)).collect();
            let p = candidates[rng.below(candidates.len())];
            let prev = if p == 0 { None } else { Some(s[p - 1]) };
            let row = lang.row_for(prev);
            let weights: Vec<f64> = task.markers[y]
                .iter()
                .map(|&m| row[(m - FIRST_CONTENT_TOKEN) as usize])
                .collect();
            s[p] = task.markers[y][rng.categorical(&weights)];
        }
        sentences.push(s);
    }
    TaskData { sentences, labels }
}

/// MLM corruption fractions among selected positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
        }
    }
}

/// Selects each non-padding, non-CLS position with `mask_prob`; selected
/// positions become `MASK` / a random content token / unchanged in the
/// configured proportions and carry their original token as the target.
pub fn mlm_mask(batch: &Batch, cfg: &MlmConfig, vocab_size: usize, seed: u64) -> Batch {
    let mut rng = Rng::new(Rng::derive(seed, 0x3a5c));
    let mut tokens = batch.tokens.clone();
    let mut targets = vec![IGNORE; tokens.len()];
    for i in 0..tokens.len() {
        let t = tokens[i];
        if !batch.attention[i] || t == CLS_TOKEN || t == PAD_TOKEN {
            continue;
        }
        if rng.next_f64() >= cfg.mask_prob {
            continue;
        }
        targets[i] = t;
        let r = rng.next_f64();
        if r < cfg.mask_token_frac {
            tokens[i] = MASK_TOKEN;
        } else if r < cfg.mask_token_frac + cfg.random_token_frac {
            let n = vocab_size - FIRST_CONTENT_TOKEN as usize;
            tokens[i] = FIRST_CONTENT_TOKEN + rng.below(n) as u32;
        }
    }
    Batch {
        tokens,
        labels: Labels::Mlm(targets),
        ..batch.clone()
    }
}

fn with_cls(s: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(s.len() + 1);
    v.push(CLS_TOKEN);
    v.extend_from_slice(s);
    v
}

/// MLM training source over sentences, with fixed-corruption validation batches.
#[derive(Debug, Clone)]
pub struct MlmData {
    train: Vec<Vec<u32>>,
    val: Vec<Batch>,
    cfg: MlmConfig,
    vocab_size: usize,
}

impl MlmData {
    /// Holds out the last `val_fraction` of sentences for validation.
    pub fn new(sentences: &[Vec<u32>], val_fraction: f64, val_batch_size: usize, cfg: MlmConfig, vocab_size: usize, seed: u64) -> Self {
        let n_val = libm::round(sentences.len() as f64 * val_fraction) as usize;
        let n_val = n_val.min(sentences.len().saturating_sub(1));
        let split = sentences.len() - n_val;
        let train: Vec<Vec<u32>> = sentences[..split].iter().map(|s| with_cls(s)).collect();
        let mut val = Vec::new();
        for (i, chunk) in sentences[split..].chunks(val_batch_size.max(1)).enumerate() {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|s| with_cls(s)).collect();
            let plain = Batch::from_sequences(&seqs, Labels::Mlm(Vec::new()));
            let masked = ensure_target(mlm_mask(&plain, &cfg, vocab_size, Rng::derive(seed ^ 0x5a1, i as u64)));
            val.push(masked);
        }
        Self { train, val, cfg, vocab_size }
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }
}

/// Forces one target if corruption selected nothing.
fn ensure_target(mut b: Batch) -> Batch {
    if let Labels::Mlm(y) = &mut b.labels {
        if y.iter().all(|&t| t == IGNORE) {
            if let Some(i) = (0..b.tokens.len()).find(|&i| b.attention[i] && b.tokens[i] != CLS_TOKEN) {
                y[i] = b.tokens[i];
                b.tokens[i] = MASK_TOKEN;
            }
        }
    }
    b
}

impl DataSource for MlmData {
    fn objective(&self) -> Objective {
        Objective::Mlm
    }

    fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Batch {
        let rows = sample_indices(self.train.len(), step, batch_size, seed);
        let seqs: Vec<Vec<u32>> = rows.iter().map(|&r| self.train[r].clone()).collect();
        let plain = Batch::from_sequences(&seqs, Labels::Mlm(Vec::new()));
        ensure_target(mlm_mask(&plain, &self.cfg, self.vocab_size, Rng::derive(seed, 0x10_0000 + step as u64)))
    }

    fn val_batches(&self) -> &[Batch] {
        &self.val
    }

    fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

/// Labeled classification source.
#[derive(Debug, Clone)]
pub struct ClassifyData {
    train: Vec<(Vec<u32>, usize)>,
    val: Vec<Batch>,
}

impl ClassifyData {
    pub fn new(train: &TaskData, val: &TaskData, val_batch_size: usize) -> Self {
        Self {
            train: train
                .sentences
                .iter()
                .zip(&train.labels)
                .map(|(s, &y)| (with_cls(s), y))
                .collect(),
            val: task_batches(val, val_batch_size),
        }
    }
}

/// Splits labeled data into CLS-prefixed batches.
pub fn task_batches(data: &TaskData, batch_size: usize) -> Vec<Batch> {
    data.sentences
        .chunks(batch_size.max(1))
        .zip(data.labels.chunks(batch_size.max(1)))
        .map(|(s, y)| {
            let seqs: Vec<Vec<u32>> = s.iter().map(|x| with_cls(x)).collect();
            Batch::from_sequences(&seqs, Labels::Class(y.to_vec()))
        })
        .collect()
}

impl DataSource for ClassifyData {
    fn objective(&self) -> Objective {
        Objective::Classify
    }

    fn train_batch(&self, step: usize, batch_size: usize, seed: u64) -> Batch {
        let rows = sample_indices(self.train.len(), step, batch_size, seed);
        let seqs: Vec<Vec<u32>> = rows.iter().map(|&r| self.train[r].0.clone()).collect();
        let labels = rows.iter().map(|&r| self.train[r].1).collect();
        Batch::from_sequences(&seqs, Labels::Class(labels))
    }

    fn val_batches(&self) -> &[Batch] {
        &self.val
    }

    fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(id: u32, eps: f64) -> Language {
        Language::new(LanguageSpec {
            id,
            vocab_size: 24,
            base_seed: 5,
            epsilon: eps,
            min_len: 4,
            max_len: 10,
        })
        .unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        for eps in [0.0, 0.3, 1.0] {
            let l = lang(2, eps);
            for row in l.rows.iter().chain(core::iter::once(&l.start)) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_divergence_shares_the_chain() {
        let a = lang(1, 0.0);
        let b = lang(2, 0.0);
        assert_eq!(a.rows, b.rows);
        assert_eq!(gen_corpus(&a, 50, 9).sentences, gen_corpus(&b, 50, 9).sentences);
        assert_ne!(lang(1, 0.5).rows, lang(2, 0.5).rows);
    }

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let l = lang(1, 0.5);
        let c = gen_corpus(&l, 100, 3);
        assert_eq!(c, gen_corpus(&l, 100, 3));
        assert!(c.sentences.iter().flatten().all(|&t| t >= FIRST_CONTENT_TOKEN && (t as usize) < 24));
        assert!(c.sentences.iter().all(|s| (4..=10).contains(&s.len())));
    }

    #[test]
    fn labels_follow_the_rule() {
        let l = lang(1, 0.5);
        let task = Task::new(TaskSpec { n_classes: 3, markers_per_class: 2, seed: 1 }, 24).unwrap();
        let data = gen_task_data(&l, &task, 300, 4);
        for (s, &y) in data.sentences.iter().zip(&data.labels) {
            assert_eq!(task.label(s), Some(y));
            assert!(s.iter().any(|&t| task.marker_class(t).is_some()));
        }
        let mut hist = [0usize; 3];
        for &y in &data.labels {
            hist[y] += 1;
        }
        assert_eq!(hist, [100, 100, 100]);
    }

    #[test]
    fn mlm_mask_extremes() {
        let seqs = vec![with_cls(&[5, 6, 7]), with_cls(&[8, 9])];
        let b = Batch::from_sequences(&seqs, Labels::Mlm(Vec::new()));
        let none = mlm_mask(&b, &MlmConfig { mask_prob: 0.0, ..Default::default() }, 24, 1);
        assert!(matches!(&none.labels, Labels::Mlm(y) if y.iter().all(|&t| t == IGNORE)));
        assert_eq!(none.tokens, b.tokens);
        let all = mlm_mask(
            &b,
            &MlmConfig { mask_prob: 1.0, mask_token_frac: 1.0, random_token_frac: 0.0 },
            24,
            1,
        );
        let Labels::Mlm(y) = &all.labels else { unreachable!() };
        #[allow(clippy::needless_range_loop)]
        for i in 0..b.tokens.len() {
            let maskable = b.attention[i] && b.tokens[i] != CLS_TOKEN;
            assert_eq!(y[i] != IGNORE, maskable);
            if maskable {
                assert_eq!(y[i], b.tokens[i]);
                assert_eq!(all.tokens[i], MASK_TOKEN);
            }
        }
    }
}
