//! Masked-LM batch generation.
//!
//! Two strategies are provided:
//!
//! * **STM**, the standard BERT recipe: every ordinary token is selected with
//!   probability `select_prob`; selected tokens are replaced by `[MASK]`,
//!   swapped for a random ordinary token, or kept, in proportions
//!   `mask_frac` / `swap_frac` / `keep_frac`.
//! * **BEM**, entity-aware masking: for each batch a subset of the entity
//!   lexicon (a fraction `rho` of its unique entities) is drawn, and every
//!   mention of a drawn entity in the batch is replaced token-for-token by
//!   `[MASK]`. When two drawn mentions touch, the left one is masked and the
//!   right one is left intact, so masked entities are never consecutive.
//!
//! All randomness comes from [`crate::rng::keyed_rng`], so batches are a pure
//! function of `(corpus, lexicon, vocab, config)`.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::lexicon::{find_mentions, EntityLexicon, EntityMention};
use crate::rng::{keyed_rng, Purpose};
use crate::tokenizer::{tokenize, Vocab};

/// Label value for positions that carry no prediction target. Negative, so
/// it can never collide with a vocab id.
pub const IGNORE_INDEX: i32 = -100;

const FRACTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Stm,
    Bem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub strategy: Strategy,
    pub select_prob: f64,
    pub mask_frac: f64,
    pub swap_frac: f64,
    pub keep_frac: f64,
    /// Fraction of unique lexicon entities drawn per batch (BEM only).
    pub rho: f64,
    /// Tokens per example, including `[CLS]` and `[SEP]`.
    pub window_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// BEM only: additionally apply STM to tokens outside every mention.
    pub background_stm: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            strategy: Strategy::Stm,
            select_prob: 0.15,
            mask_frac: 0.80,
            swap_frac: 0.10,
            keep_frac: 0.10,
            rho: 0.3,
            window_len: 128,
            batch_size: 32,
            seed: 0,
            background_stm: false,
        }
    }
}

impl MaskingConfig {
    pub fn stm(seed: u64) -> Self {
        MaskingConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn bem(rho: f64, seed: u64) -> Self {
        MaskingConfig {
            strategy: Strategy::Bem,
            rho,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        frac("mask_frac", self.mask_frac)?;
        frac("swap_frac", self.swap_frac)?;
        frac("keep_frac", self.keep_frac)?;
        let total = self.mask_frac + self.swap_frac + self.keep_frac;
        if (total - 1.0).abs() > FRACTION_TOLERANCE {
            return Err(Error::Config(format!(
                "mask_frac + swap_frac + keep_frac must equal 1, got {total}"
            )));
        }
        if !(self.select_prob > 0.0 && self.select_prob <= 1.0) {
            return Err(Error::Config(format!(
                "select_prob must lie in (0, 1], got {}",
                self.select_prob
            )));
        }
        check_rho(self.rho)?;
        if self.window_len < 3 {
            return Err(Error::Config(format!(
                "window_len must be at least 3, got {}",
                self.window_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("rho must lie in (0, 1], got {rho}")))
    }
}

/// Entities drawn for one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySubset {
    pub surfaces: BTreeSet<String>,
    pub batch_index: u64,
    pub seed_used: u64,
}

impl EntitySubset {
    pub fn contains(&self, surface: &str) -> bool {
        self.surfaces.contains(surface)
    }
}

/// Number of entities drawn from a lexicon of `lexicon_len` entries.
pub fn subset_size(lexicon_len: usize, rho: f64) -> usize {
    ((rho * lexicon_len as f64).round() as usize).clamp(1, lexicon_len.max(1))
}

/// Draws `max(1, round(rho * |E|))` distinct entities uniformly at random.
/// The draw depends only on `(seed, batch_index)`.
pub fn sample_entity_subset(
    lexicon: &EntityLexicon,
    rho: f64,
    batch_index: u64,
    seed: u64,
) -> Result<EntitySubset> {
    if lexicon.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    check_rho(rho)?;
    let n = lexicon.len();
    let mut rng = keyed_rng(seed, Purpose::EntitySubset, batch_index, 0);
    let picked = index::sample(&mut rng, n, subset_size(n, rho));
    let entries = lexicon.entries();
    Ok(EntitySubset {
        surfaces: picked.iter().map(|i| entries[i].surface.clone()).collect(),
        batch_index,
        seed_used: seed,
    })
}

/// One training example of `window_len` positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    pub label_ids: Vec<i32>,
    pub attention_mask: Vec<u8>,
    /// Positions carrying a label, ascending.
    pub masked_positions: Vec<u32>,
    pub batch_index: u64,
    pub example_index: u64,
}

impl MaskedExample {
    fn unmasked(window: &[u32], window_len: usize, pad: u32) -> Result<Self> {
        if window.len() > window_len {
            return Err(Error::Size {
                len: window.len(),
                max: window_len,
            });
        }
        let mut input_ids = window.to_vec();
        input_ids.resize(window_len, pad);
        let mut attention_mask = vec![1u8; window.len()];
        attention_mask.resize(window_len, 0);
        Ok(MaskedExample {
            input_ids,
            label_ids: vec![IGNORE_INDEX; window_len],
            attention_mask,
            masked_positions: Vec::new(),
            batch_index: 0,
            example_index: 0,
        })
    }

    /// The original token ids, reconstructed from inputs and labels.
    pub fn original_ids(&self) -> Vec<u32> {
        self.input_ids
            .iter()
            .zip(&self.label_ids)
            .map(|(&i, &l)| if l == IGNORE_INDEX { i } else { l as u32 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub batch_index: u64,
    /// Entities drawn for this batch (BEM only).
    pub subset: Option<EntitySubset>,
    pub examples: Vec<MaskedExample>,
}

impl MaskedBatch {
    pub fn masked_count(&self) -> usize {
        self.examples.iter().map(|e| e.masked_positions.len()).sum()
    }
}

/// Applies standard masking to one unpadded window. Special tokens are never
/// selected.
pub fn stm_mask<R: Rng>(
    window: &[u32],
    vocab: &Vocab,
    config: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedExample> {
    let mut ex = MaskedExample::unmasked(window, config.window_len, vocab.specials().pad)?;
    stm_positions(&mut ex, 0..window.len(), vocab, config, rng);
    Ok(ex)
}

/// STM over the given positions, skipping specials and already-labeled slots.
fn stm_positions<R: Rng>(
    ex: &mut MaskedExample,
    positions: impl IntoIterator<Item = usize>,
    vocab: &Vocab,
    config: &MaskingConfig,
    rng: &mut R,
) {
    let mask_id = vocab.specials().mask;
    let pool = vocab.non_special_ids();
    for p in positions {
        let original = ex.input_ids[p];
        if vocab.is_special(original) || ex.label_ids[p] != IGNORE_INDEX {
            continue;
        }
        if rng.gen::<f64>() >= config.select_prob {
            continue;
        }
        ex.label_ids[p] = original as i32;
        ex.masked_positions.push(p as u32);
        let r: f64 = rng.gen();
        if r < config.mask_frac {
            ex.input_ids[p] = mask_id;
        } else if r < config.mask_frac + config.swap_frac {
            ex.input_ids[p] = random_other(pool, original, rng);
        }
    }
}

/// Uniform draw from `pool` excluding `original` (when possible). `pool` is
/// sorted ascending and contains `original`.
fn random_other<R: Rng>(pool: &[u32], original: u32, rng: &mut R) -> u32 {
    if pool.len() <= 1 {
        return original;
    }
    let skip = pool.binary_search(&original).unwrap_or(pool.len());
    let mut i = rng.gen_range(0..pool.len() - 1);
    if i >= skip {
        i += 1;
    }
    pool[i]
}

/// Applies entity-aware masking to one unpadded window.
///
/// `mentions` carry token ranges relative to `window`. A mention is masked
/// when its surface is in `subset`, unless it starts exactly where the
/// previously masked mention ended. `rng` is only consulted when
/// `config.background_stm` is set.
pub fn bem_mask<R: Rng>(
    window: &[u32],
    mentions: &[EntityMention],
    subset: &EntitySubset,
    vocab: &Vocab,
    config: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedExample> {
    let mut ex = MaskedExample::unmasked(window, config.window_len, vocab.specials().pad)?;
    for m in mentions {
        if m.token_range.is_empty() || m.token_range.end > window.len() {
            return Err(Error::Alignment(format!(
                "mention {:?} token range {:?} outside window of {} tokens",
                m.entity_surface,
                m.token_range,
                window.len()
            )));
        }
    }
    let mut order: Vec<&EntityMention> = mentions.iter().collect();
    order.sort_by_key(|m| (m.token_range.start, m.token_range.end));

    let mask_id = vocab.specials().mask;
    let mut last_masked_end: Option<usize> = None;
    for m in order {
        if !subset.contains(&m.entity_surface) {
            continue;
        }
        if last_masked_end.is_some_and(|end| m.token_range.start <= end) {
            continue;
        }
        for p in m.token_range.clone() {
            ex.label_ids[p] = window[p] as i32;
            ex.input_ids[p] = mask_id;
            ex.masked_positions.push(p as u32);
        }
        last_masked_end = Some(m.token_range.end);
    }

    if config.background_stm {
        let mut in_mention = vec![false; window.len()];
        for m in mentions {
            in_mention[m.token_range.clone()].fill(true);
        }
        let outside: Vec<usize> = (0..window.len()).filter(|&p| !in_mention[p]).collect();
        stm_positions(&mut ex, outside, vocab, config, rng);
        ex.masked_positions.sort_unstable();
    }
    Ok(ex)
}

/// One window cut from a document, ready for masking.
#[derive(Debug, Clone)]
struct PreparedWindow {
    /// `[CLS] tokens.. [SEP]`, unpadded.
    ids: Vec<u32>,
    /// Mentions fully inside the window, in window coordinates.
    mentions: Vec<EntityMention>,
}

/// Counters gathered while preparing and masking.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BatchStats {
    pub documents: usize,
    pub windows: usize,
    pub batches: usize,
    pub mentions: usize,
    /// Mentions dropped because a window boundary cut through them.
    pub split_mentions: usize,
    pub masked_positions: usize,
    /// Batches in which nothing was masked.
    pub empty_batches: usize,
}

/// Tokenized and windowed corpus; produces any batch on demand.
#[derive(Debug)]
pub struct BatchPlan<'a> {
    vocab: &'a Vocab,
    lexicon: Option<&'a EntityLexicon>,
    config: MaskingConfig,
    windows: Vec<PreparedWindow>,
    stats: BatchStats,
}

impl<'a> BatchPlan<'a> {
    /// Tokenizes every document, locates entity mentions (BEM) and cuts
    /// windows of `window_len - 2` content tokens.
    pub fn prepare(
        corpus: &Corpus,
        lexicon: Option<&'a EntityLexicon>,
        vocab: &'a Vocab,
        config: &MaskingConfig,
    ) -> Result<Self> {
        config.validate()?;
        let lexicon = match config.strategy {
            Strategy::Stm => None,
            Strategy::Bem => match lexicon {
                Some(l) if !l.is_empty() => Some(l),
                _ => return Err(Error::EmptyLexicon),
            },
        };
        let content = config.window_len - 2;
        let specials = vocab.specials();
        let per_doc: Vec<(Vec<PreparedWindow>, usize, usize)> = corpus
            .documents()
            .par_iter()
            .map(|doc| {
                let tokens = tokenize(&doc.text, vocab);
                let mentions = lexicon
                    .map(|lex| find_mentions(doc, lex, &tokens))
                    .unwrap_or_default();
                let mut windows = Vec::new();
                let mut split = 0;
                let mut next_mention = 0;
                for (chunk_no, chunk) in tokens.chunks(content).enumerate() {
                    let lo = chunk_no * content;
                    let hi = lo + chunk.len();
                    let mut ids = Vec::with_capacity(chunk.len() + 2);
                    ids.push(specials.cls);
                    ids.extend(chunk.iter().map(|t| t.token_id));
                    ids.push(specials.sep);
                    let mut inside = Vec::new();
                    while next_mention < mentions.len() && mentions[next_mention].token_range.start < hi {
                        let m = &mentions[next_mention];
                        if m.token_range.end <= hi {
                            inside.push(EntityMention {
                                token_range: shift(&m.token_range, lo, 1),
                                ..m.clone()
                            });
                        } else {
                            split += 1;
                        }
                        next_mention += 1;
                    }
                    windows.push(PreparedWindow { ids, mentions: inside });
                }
                (windows, mentions.len(), split)
            })
            .collect();

        let mut stats = BatchStats {
            documents: corpus.len(),
            ..Default::default()
        };
        let mut windows = Vec::new();
        for (w, mentions, split) in per_doc {
            stats.mentions += mentions;
            stats.split_mentions += split;
            windows.extend(w);
        }
        stats.windows = windows.len();
        stats.batches = windows.len().div_ceil(config.batch_size);
        Ok(BatchPlan {
            vocab,
            lexicon,
            config: config.clone(),
            windows,
            stats,
        })
    }

    pub fn config(&self) -> &MaskingConfig {
        &self.config
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn num_batches(&self) -> usize {
        self.stats.batches
    }

    /// Masks batch `batch_index`. Depends only on the plan and the index.
    pub fn batch(&self, batch_index: usize) -> Result<MaskedBatch> {
        let size = self.config.batch_size;
        let windows = self
            .windows
            .get(batch_index * size..((batch_index + 1) * size).min(self.windows.len()))
            .filter(|w| !w.is_empty())
            .ok_or_else(|| Error::Precondition(format!("batch {batch_index} out of range")))?;
        let b = batch_index as u64;
        let seed = self.config.seed;
        let subset = match self.lexicon {
            Some(lex) => Some(sample_entity_subset(lex, self.config.rho, b, seed)?),
            None => None,
        };
        let mut examples = Vec::with_capacity(windows.len());
        for (e, w) in windows.iter().enumerate() {
            let mut ex = match &subset {
                None => {
                    let mut rng = keyed_rng(seed, Purpose::StandardMasking, b, e as u64);
                    stm_mask(&w.ids, self.vocab, &self.config, &mut rng)?
                }
                Some(subset) => {
                    let mut rng = keyed_rng(seed, Purpose::BackgroundMasking, b, e as u64);
                    bem_mask(&w.ids, &w.mentions, subset, self.vocab, &self.config, &mut rng)?
                }
            };
            ex.batch_index = b;
            ex.example_index = e as u64;
            examples.push(ex);
        }
        Ok(MaskedBatch {
            batch_index: b,
            subset,
            examples,
        })
    }

    /// Masks every batch on the current rayon pool, in batch order.
    pub fn all(&self) -> Result<Vec<MaskedBatch>> {
        (0..self.num_batches())
            .into_par_iter()
            .map(|i| self.batch(i))
            .collect()
    }

    /// Like [`BatchPlan::all`] on a dedicated pool of `workers` threads
    /// (0 = rayon default). Output does not depend on `workers`.
    pub fn all_with_workers(&self, workers: usize) -> Result<Vec<MaskedBatch>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| self.all())
    }

    /// Preparation counters combined with masking counters for `batches`.
    pub fn stats_for(&self, batches: &[MaskedBatch]) -> BatchStats {
        let mut stats = self.stats.clone();
        stats.masked_positions = batches.iter().map(MaskedBatch::masked_count).sum();
        stats.empty_batches = batches.iter().filter(|b| b.masked_count() == 0).count();
        stats
    }
}

fn shift(range: &Range<usize>, minus: usize, plus: usize) -> Range<usize> {
    range.start - minus + plus..range.end - minus + plus
}

/// Prepares and masks a whole corpus.
pub fn make_batches(
    corpus: &Corpus,
    lexicon: Option<&EntityLexicon>,
    vocab: &Vocab,
    config: &MaskingConfig,
) -> Result<Vec<MaskedBatch>> {
    let plan = BatchPlan::prepare(corpus, lexicon, vocab, config)?;
    let batches = plan.all()?;
    let stats = plan.stats_for(&batches);
    if config.strategy == Strategy::Bem && stats.empty_batches > 0 {
        log::warn!(
            "{} of {} batches contain no mention of their sampled entities",
            stats.empty_batches,
            stats.batches
        );
    }
    Ok(batches)
}
