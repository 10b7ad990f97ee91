#![allow(dead_code)]

//! Synthetic corpora with planted entity mentions.
//!
//! Every word is its own vocabulary token, so token positions can be
//! reasoned about without running the tokenizer. Documents are about one of
//! ten topics; each sentence starts with the topic cue and draws entities
//! from that topic only.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bem_core::corpus::{Corpus, Document};
use bem_core::tokenizer::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FILLERS: usize = 200;
pub const TOPICS: usize = 10;
pub const SINGLE_ENTITIES: usize = 70;
pub const DOUBLE_ENTITIES: usize = 30;

pub fn entity_surfaces() -> Vec<String> {
    let mut out: Vec<String> = (0..SINGLE_ENTITIES).map(|i| format!("ent{i}")).collect();
    out.extend((0..DOUBLE_ENTITIES).map(|i| format!("dx{i} dy{i}")));
    out
}

pub fn vocab_tokens() -> Vec<String> {
    let mut t: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "."]
        .iter()
        .map(|s| s.to_string())
        .collect();
    t.extend((0..FILLERS).map(|i| format!("w{i}")));
    t.extend((0..TOPICS).map(|i| format!("topic{i}")));
    for e in entity_surfaces() {
        t.extend(e.split(' ').map(String::from));
    }
    t
}

pub fn vocab() -> Vocab {
    Vocab::from_tokens(vocab_tokens()).unwrap()
}

#[derive(Debug, Clone)]
pub struct Mention {
    pub doc: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub surface: String,
}

pub struct Synthetic {
    pub docs: Vec<(String, String)>,
    pub mentions: Vec<Mention>,
    /// Word-level token count, punctuation included.
    pub tokens: usize,
}

pub struct Params {
    pub tokens: usize,
    pub seed: u64,
    /// Chance that a word slot holds an entity mention.
    pub mention_rate: f64,
    /// Chance that a mention is immediately followed by a second one.
    pub adjacent_rate: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            tokens: 10_000,
            seed: 1,
            mention_rate: 0.15,
            adjacent_rate: 0.3,
        }
    }
}

fn topic_entity(rng: &mut ChaCha8Rng, topic: usize) -> String {
    let all = entity_surfaces();
    let mine: Vec<&String> = all.iter().enumerate().filter(|(i, _)| i % TOPICS == topic).map(|(_, e)| e).collect();
    mine[rng.gen_range(0..mine.len())].clone()
}

pub fn generate(p: &Params) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut docs = Vec::new();
    let mut mentions = Vec::new();
    let mut tokens = 0;
    while tokens < p.tokens {
        let doc = docs.len();
        let topic = rng.gen_range(0..TOPICS);
        let mut text = String::new();
        let mut chars = 0usize;
        let push_word = |text: &mut String, chars: &mut usize, w: &str| {
            if !text.is_empty() {
                text.push(' ');
                *chars += 1;
            }
            let start = *chars;
            text.push_str(w);
            *chars += w.chars().count();
            start
        };
        for _ in 0..rng.gen_range(3..10) {
            push_word(&mut text, &mut chars, &format!("topic{topic}"));
            tokens += 1;
            for _ in 0..rng.gen_range(8..20) {
                if rng.gen_bool(p.mention_rate) {
                    let n = if rng.gen_bool(p.adjacent_rate) { 2 } else { 1 };
                    for _ in 0..n {
                        let e = topic_entity(&mut rng, topic);
                        let start = push_word(&mut text, &mut chars, &e);
                        tokens += e.split(' ').count();
                        mentions.push(Mention {
                            doc,
                            char_start: start,
                            char_end: chars,
                            surface: e,
                        });
                    }
                } else {
                    push_word(&mut text, &mut chars, &format!("w{}", rng.gen_range(0..FILLERS)));
                    tokens += 1;
                }
            }
            text.push('.');
            chars += 1;
            tokens += 1;
        }
        docs.push((format!("doc{doc:05}"), text));
    }
    Synthetic { docs, mentions, tokens }
}

impl Synthetic {
    pub fn corpus(&self) -> Corpus {
        Corpus::from_documents(self.docs.iter().map(|(id, t)| Document::new(id.clone(), t.clone())).collect()).unwrap()
    }

    pub fn write_corpus(&self, path: &Path) {
        let mut out = String::new();
        for (id, text) in &self.docs {
            writeln!(out, "{}", serde_json::json!({"doc_id": id, "text": text})).unwrap();
        }
        fs::write(path, out).unwrap();
    }

    /// Standoff annotations for every planted mention. Topics 0-4 label
    /// their entities DISEASE, the rest CHEMICAL.
    pub fn write_annotations(&self, path: &Path) {
        let all = entity_surfaces();
        let mut out = String::new();
        for m in &self.mentions {
            let idx = all.iter().position(|e| *e == m.surface).unwrap();
            let label = if idx % TOPICS < 5 { "DISEASE" } else { "CHEMICAL" };
            let rec = serde_json::json!({
                "doc_id": self.docs[m.doc].0,
                "start": m.char_start,
                "end": m.char_end,
                "text": m.surface,
                "label": label,
            });
            writeln!(out, "{rec}").unwrap();
        }
        fs::write(path, out).unwrap();
    }
}

pub fn write_vocab(path: &Path) {
    fs::write(path, vocab_tokens().join("\n") + "\n").unwrap();
}

/// Writes vocab.txt, corpus.jsonl and annotations.jsonl into `dir`.
pub fn write_all(dir: &Path, p: &Params) -> (PathBuf, PathBuf, PathBuf) {
    let s = generate(p);
    let (v, c, a) = (dir.join("vocab.txt"), dir.join("corpus.jsonl"), dir.join("annotations.jsonl"));
    write_vocab(&v);
    s.write_corpus(&c);
    s.write_annotations(&a);
    (v, c, a)
}

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}
