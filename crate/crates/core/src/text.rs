//! Small text helpers shared by the tokenizer, the entity matcher and the QA
//! tools.
//!
//! Offsets inside the library are byte offsets into UTF-8 strings. Files that
//! are exchanged with Python tooling (NER annotations, SQuAD answers, corpus
//! sentence spans) carry Unicode scalar offsets instead; [`CharOffsets`]
//! converts between the two.

/// Version tag for [`normalize_answer`], recorded in metric reports.
pub const ANSWER_NORMALIZATION_VERSION: &str = "lower+collapse-ws+strip-edge-punct/v1";

/// Punctuation as seen by the pre-tokenizer: ASCII punctuation plus any
/// non-ASCII character that is neither alphanumeric, whitespace nor control.
pub fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        c.is_ascii_punctuation()
    } else {
        !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control()
    }
}

/// Lowercases one character only when the result is a single character, so
/// that folded text keeps a one-to-one character mapping with its source.
pub fn fold_char(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Case-folds a string character by character (see [`fold_char`]).
pub fn fold_case(s: &str) -> String {
    s.chars().map(fold_char).collect()
}

/// Case-folds and collapses runs of whitespace into a single space, trimming
/// both ends.
pub fn canonical_surface(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().map(fold_char));
    }
    out
}

/// Answer normalization used for matching candidates against gold strings:
/// lowercase, collapse whitespace, strip leading and trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = canonical_surface(s);
    collapsed
        .trim_matches(|c: char| is_punctuation(c) || c.is_whitespace())
        .to_string()
}

/// Byte-offset lookup table for the characters of a string.
#[derive(Debug, Clone)]
pub struct CharOffsets {
    /// `bytes[i]` is the byte offset of character `i`; one extra entry holds
    /// the total byte length.
    bytes: Vec<usize>,
}

impl CharOffsets {
    pub fn new(text: &str) -> Self {
        let mut bytes: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        bytes.push(text.len());
        CharOffsets { bytes }
    }

    pub fn char_len(&self) -> usize {
        self.bytes.len() - 1
    }

    /// Byte offset of the character at `char_offset`; `None` past the end.
    pub fn to_byte(&self, char_offset: usize) -> Option<usize> {
        self.bytes.get(char_offset).copied()
    }

    /// Character offset of a byte offset lying on a character boundary.
    pub fn to_char(&self, byte_offset: usize) -> Option<usize> {
        self.bytes.binary_search(&byte_offset).ok()
    }
}

/// Byte offsets of every (possibly overlapping) case-insensitive occurrence of
/// `needle` in `haystack`.
pub fn find_all_case_insensitive(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    let needle: Vec<char> = needle.chars().map(fold_char).collect();
    if needle.is_empty() {
        return Vec::new();
    }
    let hay: Vec<(usize, char)> = haystack
        .char_indices()
        .map(|(b, c)| (b, fold_char(c)))
        .collect();
    let mut hits = Vec::new();
    if hay.len() < needle.len() {
        return hits;
    }
    for start in 0..=hay.len() - needle.len() {
        if hay[start..start + needle.len()]
            .iter()
            .zip(&needle)
            .all(|((_, h), n)| h == n)
        {
            let end_char = start + needle.len();
            let end = hay.get(end_char).map(|(b, _)| *b).unwrap_or(haystack.len());
            hits.push((hay[start].0, end));
        }
    }
    hits
}
