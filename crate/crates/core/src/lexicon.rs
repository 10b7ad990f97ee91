//! Entity lexicon built offline from standoff NER annotations, and a
//! dictionary matcher that finds lexicon mentions in documents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};
use crate::text::{canonical_surface, fold_case, CharOffsets};
use crate::tokenizer::{align_span, split_words, tokenize, TokenSpan, Vocab};

const LEXICON_FORMAT: &str = "bem-lexicon";
const LEXICON_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityEntry {
    /// Case-folded, whitespace-collapsed surface form.
    pub surface: String,
    pub label: String,
    /// Number of annotations that produced this surface.
    pub count: usize,
    pub token_ids: Vec<u32>,
}

/// Surface split into folded words plus, for each word gap, whether the
/// original had whitespace there.
#[derive(Debug, Clone)]
struct Pattern {
    words: Vec<String>,
    spaced: Vec<bool>,
}

impl Pattern {
    fn new(text: &str) -> Self {
        let ranges = split_words(text);
        let words = ranges.iter().map(|r| fold_case(&text[r.clone()])).collect();
        let spaced = ranges.windows(2).map(|w| w[0].end < w[1].start).collect();
        Pattern { words, spaced }
    }
}

/// The entity set used for entity-aware masking. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct EntityLexicon {
    entries: Vec<EntityEntry>,
    by_surface: HashMap<String, usize>,
    // first folded word -> entry indices, longest pattern first
    by_first_word: HashMap<String, Vec<usize>>,
    patterns: Vec<Pattern>,
    vocab_fingerprint: Option<String>,
}

impl EntityLexicon {
    /// Assembles a lexicon, enforcing unique surfaces and non-empty token ids.
    /// Entries are kept sorted by surface.
    pub fn from_entries(mut entries: Vec<EntityEntry>) -> Result<Self> {
        for e in &mut entries {
            e.surface = canonical_surface(&e.surface);
        }
        entries.sort_by(|a, b| a.surface.cmp(&b.surface));
        let mut by_surface = HashMap::with_capacity(entries.len());
        let mut patterns = Vec::with_capacity(entries.len());
        let mut by_first_word: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.surface.is_empty() || e.token_ids.is_empty() {
                return Err(Error::Config(format!("lexicon entry {:?} has no tokens", e.surface)));
            }
            if by_surface.insert(e.surface.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate lexicon surface {:?}", e.surface)));
            }
            let pattern = Pattern::new(&e.surface);
            by_first_word
                .entry(pattern.words[0].clone())
                .or_default()
                .push(i);
            patterns.push(pattern);
        }
        for list in by_first_word.values_mut() {
            list.sort_by(|&a, &b| {
                patterns[b].words.len().cmp(&patterns[a].words.len()).then(a.cmp(&b))
            });
        }
        Ok(EntityLexicon {
            entries,
            by_surface,
            by_first_word,
            patterns,
            vocab_fingerprint: None,
        })
    }

    /// Convenience constructor tokenizing each surface with `vocab`.
    pub fn from_surfaces<I, S>(surfaces: I, label: &str, vocab: &Vocab) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let entries = surfaces
            .into_iter()
            .map(|s| {
                let surface = canonical_surface(s.as_ref());
                EntityEntry {
                    token_ids: tokenize(&surface, vocab).iter().map(|t| t.token_id).collect(),
                    surface,
                    label: label.to_string(),
                    count: 1,
                }
            })
            .collect();
        Ok(Self::from_entries(entries)?.with_vocab_fingerprint(vocab.fingerprint()))
    }

    fn with_vocab_fingerprint(mut self, fingerprint: String) -> Self {
        self.vocab_fingerprint = Some(fingerprint);
        self
    }

    pub fn entries(&self) -> &[EntityEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<&EntityEntry> {
        self.by_surface.get(surface).map(|&i| &self.entries[i])
    }

    /// Fingerprint of the vocab the token ids were produced with, if known.
    pub fn vocab_fingerprint(&self) -> Option<&str> {
        self.vocab_fingerprint.as_deref()
    }

    /// Number of entries per label.
    pub fn label_histogram(&self) -> BTreeMap<String, usize> {
        let mut hist = BTreeMap::new();
        for e in &self.entries {
            *hist.entry(e.label.clone()).or_insert(0) += 1;
        }
        hist
    }

    pub fn save(&self, path: impl AsRef<Path>, provenance: Option<serde_json::Value>) -> Result<()> {
        let path = path.as_ref();
        let file = LexiconFile {
            format: LEXICON_FORMAT.to_string(),
            version: LEXICON_VERSION,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            provenance,
            entries: self.entries.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Invariant(format!("serializing lexicon: {e}")))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: LexiconFile =
            serde_json::from_str(&raw).map_err(|e| Error::format(path, e.line(), e.to_string()))?;
        if file.format != LEXICON_FORMAT || file.version != LEXICON_VERSION {
            return Err(Error::format(
                path,
                1,
                format!("unsupported lexicon format {} v{}", file.format, file.version),
            ));
        }
        let lexicon = Self::from_entries(file.entries)?;
        Ok(match file.vocab_fingerprint {
            Some(fp) => lexicon.with_vocab_fingerprint(fp),
            None => lexicon,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    format: String,
    version: u32,
    #[serde(default)]
    vocab_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    entries: Vec<EntityEntry>,
}

/// One standoff NER annotation; offsets count Unicode characters.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct Annotation {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct LexiconOptions {
    pub min_count: usize,
    /// Keep only annotations with one of these labels; `None` keeps all.
    pub labels: Option<BTreeSet<String>>,
}

impl Default for LexiconOptions {
    fn default() -> Self {
        LexiconOptions {
            min_count: 1,
            labels: None,
        }
    }
}

/// Reads the annotation JSONL file. Blank lines are skipped.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, i + 1, e.to_string())))
        .collect()
}

/// Builds the lexicon from an annotation file. When `corpus` is given every
/// annotation is checked against the document text it points into.
pub fn build_lexicon(
    annotations: impl AsRef<Path>,
    vocab: &Vocab,
    corpus: Option<&Corpus>,
    options: &LexiconOptions,
) -> Result<EntityLexicon> {
    let records = load_annotations(annotations)?;
    build_lexicon_from(&records, vocab, corpus, options)
}

pub fn build_lexicon_from(
    records: &[Annotation],
    vocab: &Vocab,
    corpus: Option<&Corpus>,
    options: &LexiconOptions,
) -> Result<EntityLexicon> {
    // surface -> (total count, label -> count)
    let mut counts: BTreeMap<String, (usize, BTreeMap<&str, usize>)> = BTreeMap::new();
    let mut offsets_cache: HashMap<&str, CharOffsets> = HashMap::new();
    for rec in records {
        check_annotation(rec, corpus, &mut offsets_cache)?;
        if let Some(allowed) = &options.labels {
            if !allowed.contains(&rec.label) {
                continue;
            }
        }
        let surface = canonical_surface(&rec.text);
        let slot = counts.entry(surface).or_default();
        slot.0 += 1;
        *slot.1.entry(rec.label.as_str()).or_insert(0) += 1;
    }
    let min_count = options.min_count.max(1);
    let entries = counts
        .into_iter()
        .filter(|(_, (n, _))| *n >= min_count)
        .map(|(surface, (count, labels))| {
            // most frequent label; BTreeMap order breaks ties alphabetically
            let label = labels
                .iter()
                .fold(None::<(&str, usize)>, |best, (&l, &n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((l, n)),
                })
                .map(|(l, _)| l.to_string())
                .unwrap_or_default();
            let token_ids: Vec<u32> = tokenize(&surface, vocab).iter().map(|t| t.token_id).collect();
            EntityEntry {
                surface,
                label,
                count,
                token_ids,
            }
        })
        .collect();
    Ok(EntityLexicon::from_entries(entries)?.with_vocab_fingerprint(vocab.fingerprint()))
}

fn check_annotation<'a>(
    rec: &Annotation,
    corpus: Option<&'a Corpus>,
    cache: &mut HashMap<&'a str, CharOffsets>,
) -> Result<()> {
    let describe = || serde_json::to_string(rec).unwrap_or_else(|_| format!("{rec:?}"));
    if rec.start >= rec.end {
        return Err(Error::Consistency(format!("empty span in {}", describe())));
    }
    if rec.text.chars().count() != rec.end - rec.start {
        return Err(Error::Consistency(format!("span length differs from text in {}", describe())));
    }
    if rec.text.trim().is_empty() {
        return Err(Error::Consistency(format!("blank entity text in {}", describe())));
    }
    if let Some(corpus) = corpus {
        let doc = corpus
            .get(&rec.doc_id)
            .ok_or_else(|| Error::Consistency(format!("unknown document in {}", describe())))?;
        let offsets = cache
            .entry(doc.doc_id.as_str())
            .or_insert_with(|| CharOffsets::new(&doc.text));
        let slice = offsets
            .to_byte(rec.start)
            .zip(offsets.to_byte(rec.end))
            .map(|(a, b)| &doc.text[a..b]);
        if slice != Some(rec.text.as_str()) {
            return Err(Error::Consistency(format!(
                "span does not match document text in {}",
                describe()
            )));
        }
    }
    Ok(())
}

/// One occurrence of a lexicon entity in a document. Offsets are bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub doc_id: String,
    pub entity_surface: String,
    pub char_start: usize,
    pub char_end: usize,
    pub token_range: Range<usize>,
}

/// Finds non-overlapping, case-insensitive, word-bounded occurrences of
/// lexicon surfaces in `doc`. Scans left to right and takes the longest
/// match at the earliest start.
pub fn find_mentions(doc: &Document, lexicon: &EntityLexicon, tokens: &[TokenSpan]) -> Vec<EntityMention> {
    if lexicon.is_empty() {
        return Vec::new();
    }
    let text = doc.text.as_str();
    let words = split_words(text);
    let folded: Vec<String> = words.iter().map(|r| fold_case(&text[r.clone()])).collect();
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let hit = lexicon.by_first_word.get(&folded[i]).and_then(|candidates| {
            candidates.iter().copied().find(|&c| {
                let p = &lexicon.patterns[c];
                let n = p.words.len();
                i + n <= words.len()
                    && p.words.iter().zip(&folded[i..i + n]).all(|(a, b)| a == b)
                    && p.spaced
                        .iter()
                        .enumerate()
                        .all(|(k, &sp)| (words[i + k].end < words[i + k + 1].start) == sp)
            })
        });
        let Some(entry) = hit else {
            i += 1;
            continue;
        };
        let n = lexicon.patterns[entry].words.len();
        let (start, end) = (words[i].start, words[i + n - 1].end);
        if let Ok(Some(token_range)) = align_span(start, end, tokens) {
            mentions.push(EntityMention {
                doc_id: doc.doc_id.clone(),
                entity_surface: lexicon.entries[entry].surface.clone(),
                char_start: start,
                char_end: end,
                token_range,
            });
        }
        i += n;
    }
    mentions
}
