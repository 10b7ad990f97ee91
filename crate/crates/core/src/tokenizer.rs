//! Greedy longest-match subword tokenizer with offset tracking.
//!
//! Text is pre-split on whitespace, punctuation characters become words of
//! their own, and each word is segmented WordPiece-style against a [`Vocab`].
//! Every produced [`TokenSpan`] records the byte range it covers in the
//! original text, which is what lets NER character spans be mapped onto token
//! positions with [`align_span`].

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{fold_char, is_punctuation};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

pub const DEFAULT_CONTINUATION_PREFIX: &str = "##";
pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

/// Ids of the five reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl SpecialIds {
    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

/// Immutable token vocabulary. Ids are dense and equal to the position of the
/// token in the vocab file.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    specials: SpecialIds,
    non_special: Vec<u32>,
    continuation_prefix: String,
    lowercase: bool,
    max_word_chars: usize,
}

impl Vocab {
    /// Builds a vocabulary from tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut token_to_id = HashMap::new();
        let mut id_to_token = Vec::new();
        for (idx, token) in tokens.into_iter().enumerate() {
            let token = token.into();
            if token.is_empty() {
                return Err(Error::Config(format!("empty token at id {idx}")));
            }
            if token_to_id.contains_key(&token) {
                return Err(Error::Config(format!("duplicate token {token:?} at id {idx}")));
            }
            let id = u32::try_from(idx)
                .ok()
                .filter(|id| *id < i32::MAX as u32)
                .ok_or_else(|| Error::Config("vocabulary too large".into()))?;
            token_to_id.insert(token.clone(), id);
            id_to_token.push(token);
        }
        Self::assemble(token_to_id, id_to_token)
    }

    /// Reads a vocab file: UTF-8, one token per line, id = zero-based line
    /// number.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut token_to_id = HashMap::new();
        let mut id_to_token = Vec::new();
        let mut lines: Vec<&str> = raw.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        for (idx, line) in lines.into_iter().enumerate() {
            let token = line.strip_suffix('\r').unwrap_or(line);
            let line_no = idx + 1;
            if token.is_empty() {
                return Err(Error::format(path, line_no, "empty token"));
            }
            if let Some(first) = token_to_id.get(token) {
                return Err(Error::format(
                    path,
                    line_no,
                    format!("duplicate token {token:?} (first seen on line {})", first + 1),
                ));
            }
            token_to_id.insert(token.to_string(), idx as u32);
            id_to_token.push(token.to_string());
        }
        Self::assemble(token_to_id, id_to_token)
    }

    fn assemble(token_to_id: HashMap<String, u32>, id_to_token: Vec<String>) -> Result<Self> {
        let lookup = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing special token {name}")))
        };
        let specials = SpecialIds {
            pad: lookup(PAD_TOKEN)?,
            unk: lookup(UNK_TOKEN)?,
            cls: lookup(CLS_TOKEN)?,
            sep: lookup(SEP_TOKEN)?,
            mask: lookup(MASK_TOKEN)?,
        };
        let non_special = (0..id_to_token.len() as u32)
            .filter(|id| !specials.contains(*id))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
            specials,
            non_special,
            continuation_prefix: DEFAULT_CONTINUATION_PREFIX.to_string(),
            lowercase: true,
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        })
    }

    /// Declares whether input text is lowercased before lookup (default true).
    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn with_continuation_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.continuation_prefix = prefix.into();
        self
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.continuation_prefix
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.specials.contains(id)
    }

    /// Ids of every ordinary token, ascending.
    pub fn non_special_ids(&self) -> &[u32] {
        &self.non_special
    }

    /// SHA-256 over the token list and tokenizer flags; recorded in batch
    /// file headers so consumers can detect a vocab mismatch.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.id_to_token {
            hasher.update(token.as_bytes());
            hasher.update(b"\n");
        }
        hasher.update(format!(
            "lowercase={};prefix={}",
            self.lowercase, self.continuation_prefix
        ));
        hex::encode(hasher.finalize())
    }
}

/// One subword produced by [`tokenize`]. Offsets are byte offsets into the
/// tokenized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub token_id: u32,
    pub char_start: usize,
    pub char_end: usize,
    pub word_index: usize,
    pub is_continuation: bool,
}

/// Splits text into pre-tokenizer words: whitespace separates words and each
/// punctuation character is a word by itself. Returns byte ranges.
pub fn split_words(text: &str) -> Vec<Range<usize>> {
    let mut words = Vec::new();
    let mut current: Option<usize> = None;
    for (pos, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(start) = current.take() {
                words.push(start..pos);
            }
        } else if is_punctuation(c) {
            if let Some(start) = current.take() {
                words.push(start..pos);
            }
            words.push(pos..pos + c.len_utf8());
        } else if current.is_none() {
            current = Some(pos);
        }
    }
    if let Some(start) = current {
        words.push(start..text.len());
    }
    words
}

/// Tokenizes `text` with greedy longest-match segmentation of every word.
/// Words with no complete segmentation, or longer than 100 characters,
/// become a single unknown-token span.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenSpan> {
    let mut out = Vec::new();
    let mut piece = String::new();
    for (word_index, range) in split_words(text).into_iter().enumerate() {
        let word = &text[range.clone()];
        let chars: Vec<(usize, char)> = word
            .char_indices()
            .map(|(b, c)| (range.start + b, if vocab.lowercase { fold_char(c) } else { c }))
            .collect();
        let byte_at = |i: usize| chars.get(i).map(|(b, _)| *b).unwrap_or(range.end);

        let word_start = out.len();
        let mut ok = chars.len() <= vocab.max_word_chars;
        let mut start = 0;
        while ok && start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(&vocab.continuation_prefix);
                }
                piece.extend(chars[start..end].iter().map(|(_, c)| *c));
                if let Some(id) = vocab.id(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((token_id, end)) => {
                    out.push(TokenSpan {
                        token_id,
                        char_start: byte_at(start),
                        char_end: byte_at(end),
                        word_index,
                        is_continuation: start > 0,
                    });
                    start = end;
                }
                None => ok = false,
            }
        }
        if !ok {
            out.truncate(word_start);
            out.push(TokenSpan {
                token_id: vocab.specials.unk,
                char_start: range.start,
                char_end: range.end,
                word_index,
                is_continuation: false,
            });
        }
    }
    out
}

/// Maps the byte span `[char_start, char_end)` to the contiguous range of
/// tokens it covers.
///
/// Returns `Ok(None)` when a span boundary falls strictly inside a token or
/// when the span covers no token at all.
pub fn align_span(
    char_start: usize,
    char_end: usize,
    tokens: &[TokenSpan],
) -> Result<Option<Range<usize>>> {
    if char_start >= char_end {
        return Err(Error::Precondition(format!(
            "empty or inverted span [{char_start}, {char_end})"
        )));
    }
    let first = tokens.partition_point(|t| t.char_end <= char_start);
    let last = tokens.partition_point(|t| t.char_start < char_end);
    if first >= last {
        return Ok(None);
    }
    if tokens[first].char_start < char_start || tokens[last - 1].char_end > char_end {
        return Ok(None);
    }
    Ok(Some(first..last))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut tokens = vec![PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN];
        tokens.extend_from_slice(extra);
        Vocab::from_tokens(tokens).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_vocab_file() {
        let f = write_tmp("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]");
        let v = Vocab::load(f.path()).unwrap();
        assert_eq!(v.len(), 5);
        let s = v.specials();
        assert_eq!((s.pad, s.unk, s.cls, s.sep, s.mask), (0, 1, 2, 3, 4));
        assert!(v.non_special_ids().is_empty());
    }

    #[test]
    fn duplicate_line_reports_line_number() {
        let f = write_tmp("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n[MASK]\n");
        match Vocab::load(f.path()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_special_is_named() {
        let f = write_tmp("[PAD]\n[CLS]\n[SEP]\n[MASK]\n");
        let err = Vocab::load(f.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("[UNK]"));
    }

    #[test]
    fn empty_line_rejected() {
        let f = write_tmp("[PAD]\n\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n");
        assert!(matches!(Vocab::load(f.path()), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&["hyper", "hypert", "##tension", "##ension", "##t"]);
        // "hypert" is longest at the start, but then "ension" needs "##ension".
        let toks = tokenize("hypertension", &v);
        let ids: Vec<_> = toks.iter().map(|t| v.token(t.token_id).unwrap()).collect();
        assert_eq!(ids, ["hypert", "##ension"]);

        let v = vocab(&["hyper", "##tension"]);
        let toks = tokenize("hypertension", &v);
        assert_eq!(toks.len(), 2);
        assert_eq!((toks[0].char_start, toks[0].char_end), (0, 5));
        assert_eq!((toks[1].char_start, toks[1].char_end), (5, 12));
        assert!(!toks[0].is_continuation && toks[1].is_continuation);
        assert_eq!(toks[1].word_index, 0);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("", &vocab(&[])).is_empty());
        assert!(tokenize("  \n\t", &vocab(&[])).is_empty());
    }

    #[test]
    fn unknown_word_is_one_span() {
        let v = vocab(&["q", "##z"]);
        let toks = tokenize("qzx", &v);
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].token_id, v.specials().unk);
        assert_eq!((toks[0].char_start, toks[0].char_end), (0, 3));
    }

    #[test]
    fn overlong_word_is_unknown() {
        let v = vocab(&["a", "##a"]);
        let long = "a".repeat(101);
        let toks = tokenize(&long, &v);
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].token_id, v.specials().unk);
        assert_eq!(tokenize(&"a".repeat(100), &v).len(), 100);
    }

    #[test]
    fn punctuation_isolated_and_case_folded() {
        let v = vocab(&["covid", "-", "19", "("]);
        let toks = tokenize("(COVID-19", &v);
        let words: Vec<_> = toks.iter().map(|t| t.word_index).collect();
        assert_eq!(words, [0, 1, 2, 3]);
        assert_eq!(v.token(toks[1].token_id), Some("covid"));
        assert_eq!((toks[1].char_start, toks[1].char_end), (1, 6));

        let cased = v.clone().with_lowercase(false);
        assert_eq!(tokenize("COVID", &cased)[0].token_id, v.specials().unk);
    }

    #[test]
    fn align_examples() {
        let v = vocab(&["hyper", "##tension"]);
        let toks = tokenize("hypertension", &v);
        assert_eq!(align_span(0, 12, &toks).unwrap(), Some(0..2));
        assert_eq!(align_span(0, 5, &toks).unwrap(), Some(0..1));
        assert_eq!(align_span(0, 4, &toks).unwrap(), None);
        assert_eq!(align_span(1, 12, &toks).unwrap(), None);
        assert!(matches!(align_span(0, 0, &toks), Err(Error::Precondition(_))));
    }

    #[test]
    fn align_across_whitespace() {
        let v = vocab(&["heart", "disease", "coronary"]);
        let text = "coronary heart  disease";
        let toks = tokenize(text, &v);
        assert_eq!(align_span(9, 23, &toks).unwrap(), Some(1..3));
        // span lying entirely in whitespace
        assert_eq!(align_span(14, 16, &toks).unwrap(), None);
    }

    #[test]
    fn fingerprint_tracks_flags() {
        let v = vocab(&["a"]);
        assert_ne!(v.fingerprint(), v.clone().with_lowercase(false).fingerprint());
        assert_eq!(v.fingerprint(), vocab(&["a"]).fingerprint());
    }
}
