//! Document ingestion and rule-based sentence segmentation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::CharOffsets;

/// Abbreviations that never end a sentence.
pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "Fig.", "Figs.", "et al.", "e.g.", "i.e.", "vs.", "cf.", "approx.", "Dr.", "No.", "Eq.",
    "Ref.", "resp.",
];

/// Byte span of one sentence inside its document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub char_start: usize,
    pub char_end: usize,
    pub sent_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub sentences: Vec<SentenceSpan>,
}

impl Document {
    /// Builds a document, segmenting it with the default segmenter.
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let sentences = segment_sentences(&text);
        Document {
            doc_id: doc_id.into(),
            text,
            sentences,
        }
    }

    pub fn sentence_text(&self, index: usize) -> Option<&str> {
        self.sentences
            .get(index)
            .map(|s| &self.text[s.char_start..s.char_end])
    }
}

/// Documents keyed by unique id, in file order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        let mut index = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if index.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::Ingestion(format!("duplicate doc_id {:?}", doc.doc_id)));
            }
        }
        Ok(Corpus { documents, index })
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Deserialize)]
struct CorpusRecord {
    doc_id: String,
    text: String,
    #[serde(default)]
    sentences: Option<Vec<[usize; 2]>>,
}

/// Loads a JSONL corpus: `{"doc_id", "text", "sentences"?: [[start, end], ...]}`
/// with sentence offsets counted in characters.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    load_corpus_with(path, &Segmenter::default())
}

pub fn load_corpus_with(path: impl AsRef<Path>, segmenter: &Segmenter) -> Result<Corpus> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<(usize, &str)> = raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let documents = lines
        .par_iter()
        .map(|&(idx, line)| parse_record(path, idx + 1, line, segmenter))
        .collect::<Result<Vec<_>>>()?;
    Corpus::from_documents(documents)
}

fn parse_record(path: &Path, line_no: usize, line: &str, segmenter: &Segmenter) -> Result<Document> {
    let record: CorpusRecord =
        serde_json::from_str(line).map_err(|e| Error::format(path, line_no, e.to_string()))?;
    let sentences = match record.sentences {
        None => segmenter.segment(&record.text),
        Some(spans) => {
            let offsets = CharOffsets::new(&record.text);
            let mut out = Vec::with_capacity(spans.len());
            for (sent_index, [start, end]) in spans.into_iter().enumerate() {
                let (Some(b0), Some(b1)) = (offsets.to_byte(start), offsets.to_byte(end)) else {
                    return Err(Error::format(path, line_no, format!("sentence {sent_index} out of bounds")));
                };
                out.push(SentenceSpan {
                    char_start: b0,
                    char_end: b1,
                    sent_index,
                });
            }
            validate_sentences(&record.text, &out)
                .map_err(|msg| Error::format(path, line_no, msg))?;
            out
        }
    };
    Ok(Document {
        doc_id: record.doc_id,
        text: record.text,
        sentences,
    })
}

/// Checks the document invariants: spans non-empty, sorted, non-overlapping
/// and jointly covering every non-whitespace character.
pub fn validate_sentences(text: &str, sentences: &[SentenceSpan]) -> std::result::Result<(), String> {
    let mut covered_to = 0;
    for (i, s) in sentences.iter().enumerate() {
        if s.sent_index != i {
            return Err(format!("sentence {i} carries index {}", s.sent_index));
        }
        if s.char_start >= s.char_end || s.char_end > text.len() {
            return Err(format!("sentence {i} has invalid span [{}, {})", s.char_start, s.char_end));
        }
        if s.char_start < covered_to {
            return Err(format!("sentence {i} overlaps or is out of order"));
        }
        if !text[covered_to..s.char_start].trim().is_empty() {
            return Err(format!("text before sentence {i} is not covered"));
        }
        covered_to = s.char_end;
    }
    if !text[covered_to..].trim().is_empty() {
        return Err("trailing text is not covered by any sentence".into());
    }
    Ok(())
}

/// Splits after `.`, `?` or `!` when followed by whitespace and then an
/// uppercase letter or a digit, unless the period closes a listed
/// abbreviation.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: Vec<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter::new(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

impl Segmenter {
    pub fn new<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Segmenter {
            abbreviations: abbreviations
                .into_iter()
                .map(|a| a.into().to_lowercase())
                .filter(|a| !a.is_empty())
                .collect(),
        }
    }

    /// Reads an abbreviation stoplist, one entry per line; blank lines and
    /// `#` comments are ignored.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Segmenter::new(
            raw.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        ))
    }

    fn closes_abbreviation(&self, prefix: &str) -> bool {
        // only the tail can match; keep one extra char for the boundary test
        let longest = self.abbreviations.iter().map(|a| a.chars().count()).max().unwrap_or(0);
        let tail_start = prefix
            .char_indices()
            .rev()
            .nth(longest)
            .map_or(0, |(b, _)| b);
        let lower = prefix[tail_start..].to_lowercase();
        self.abbreviations.iter().any(|abbr| {
            lower.ends_with(abbr.as_str())
                && lower[..lower.len() - abbr.len()]
                    .chars()
                    .next_back()
                    .map_or(true, |c| !c.is_alphanumeric())
        })
    }

    pub fn segment(&self, text: &str) -> Vec<SentenceSpan> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let byte_at = |i: usize| chars.get(i).map_or(text.len(), |(b, _)| *b);
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        let mut i = 0;
        while i < chars.len() {
            let (pos, c) = chars[i];
            if start.is_none() && !c.is_whitespace() {
                start = Some(pos);
            }
            if !matches!(c, '.' | '?' | '!') {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '?' | '!' | ')' | ']' | '"' | '\'') {
                j += 1;
            }
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let boundary = k > j
                && k < chars.len()
                && (chars[k].1.is_uppercase() || chars[k].1.is_ascii_digit())
                && !(c == '.' && self.closes_abbreviation(&text[..pos + 1]));
            if boundary {
                if let Some(s) = start.take() {
                    out.push(SentenceSpan {
                        char_start: s,
                        char_end: byte_at(j),
                        sent_index: out.len(),
                    });
                }
            }
            i = j;
        }
        if let Some(s) = start {
            let end = s + text[s..].trim_end().len();
            out.push(SentenceSpan {
                char_start: s,
                char_end: end,
                sent_index: out.len(),
            });
        }
        out
    }
}

/// Segments with the default abbreviation stoplist.
pub fn segment_sentences(text: &str) -> Vec<SentenceSpan> {
    Segmenter::default().segment(text)
}
