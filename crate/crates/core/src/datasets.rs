//! QA datasets: BioASQ factoid questions converted to SQuAD-style extractive
//! pairs, and CovidQA loaded for sentence-level retrieval evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{segment_sentences, Corpus};
use crate::error::{Error, Result};
use crate::text::{canonical_surface, fold_case, find_all_case_insensitive, CharOffsets};

pub const DEFAULT_MAX_CONTEXT_CHARS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquadAnswer {
    pub text: String,
    /// Character offset into the context.
    pub answer_start: usize,
}

/// One (question, passage) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquadExample {
    pub qid: String,
    pub question: String,
    pub context: String,
    pub answers: Vec<SquadAnswer>,
    /// Shared by every pair expanded from the same source question.
    pub group_id: String,
}

impl SquadExample {
    /// Pairs whose passage contains no answer variant.
    pub fn is_impossible(&self) -> bool {
        self.answers.is_empty()
    }

    /// Checks that every answer's offset points at its text, ignoring case.
    pub fn check_answers(&self) -> Result<()> {
        let offsets = CharOffsets::new(&self.context);
        for a in &self.answers {
            let len = a.text.chars().count();
            let span = offsets
                .to_byte(a.answer_start)
                .zip(offsets.to_byte(a.answer_start + len))
                .map(|(s, e)| &self.context[s..e]);
            if span.map(fold_case) != Some(fold_case(&a.text)) {
                return Err(Error::Invariant(format!(
                    "answer {:?} at {} does not match context of {}",
                    a.text, a.answer_start, self.qid
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvertOptions {
    /// Emit pairs whose passage lacks every answer variant, with empty
    /// answers. Dropped by default.
    pub keep_unanswerable: bool,
    /// Passages longer than this many characters are split into chunks of
    /// whole sentences overlapping by one sentence.
    pub max_context_chars: usize,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            keep_unanswerable: false,
            max_context_chars: DEFAULT_MAX_CONTEXT_CHARS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConversionStats {
    pub questions: usize,
    pub factoid_questions: usize,
    pub skipped_non_factoid: usize,
    pub skipped_without_passages: usize,
    pub pairs: usize,
    pub unanswerable_pairs: usize,
    pub dropped_unanswerable: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ConvertedDataset {
    /// Sorted by qid.
    pub examples: Vec<SquadExample>,
    /// Gold answer variants per group, for evaluation.
    pub golds: BTreeMap<String, Vec<String>>,
    pub stats: ConversionStats,
}

#[derive(Deserialize)]
struct BioAsqFile {
    questions: Vec<BioAsqQuestion>,
}

#[derive(Deserialize)]
struct BioAsqQuestion {
    id: String,
    #[serde(rename = "type")]
    kind: String,
    body: String,
    #[serde(default)]
    snippets: Vec<BioAsqSnippet>,
    #[serde(default)]
    passages: Vec<String>,
    #[serde(default)]
    exact_answer: serde_json::Value,
}

#[derive(Deserialize)]
struct BioAsqSnippet {
    text: String,
}

fn flatten_strings(value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::String(s) => {
            let s = s.trim();
            if !s.is_empty() && !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        }
        serde_json::Value::Array(items) => items.iter().for_each(|v| flatten_strings(v, out)),
        _ => {}
    }
}

/// Reads a BioASQ JSON file and converts its factoid questions.
pub fn convert_bioasq(path: impl AsRef<Path>, options: &ConvertOptions) -> Result<ConvertedDataset> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BioAsqFile =
        serde_json::from_str(&raw).map_err(|e| Error::format(path, e.line(), e.to_string()))?;
    convert_questions(file.questions, options)
}

/// Converts BioASQ JSON already held in memory.
pub fn convert_bioasq_str(json: &str, options: &ConvertOptions) -> Result<ConvertedDataset> {
    let file: BioAsqFile = serde_json::from_str(json)
        .map_err(|e| Error::format("<memory>", e.line(), e.to_string()))?;
    convert_questions(file.questions, options)
}

fn convert_questions(questions: Vec<BioAsqQuestion>, options: &ConvertOptions) -> Result<ConvertedDataset> {
    let mut out = ConvertedDataset::default();
    out.stats.questions = questions.len();
    for q in questions {
        if q.kind != "factoid" {
            out.stats.skipped_non_factoid += 1;
            continue;
        }
        out.stats.factoid_questions += 1;
        let passages: Vec<&str> = q
            .snippets
            .iter()
            .map(|s| s.text.as_str())
            .chain(q.passages.iter().map(String::as_str))
            .filter(|p| !p.trim().is_empty())
            .collect();
        if passages.is_empty() {
            out.stats.skipped_without_passages += 1;
            log::warn!("question {} has no passages; skipped", q.id);
            continue;
        }
        let mut variants = Vec::new();
        flatten_strings(&q.exact_answer, &mut variants);
        out.golds.insert(q.id.clone(), variants.clone());

        for (p_idx, passage) in passages.iter().enumerate() {
            let chunks = chunk_passage(passage, options.max_context_chars);
            let chunked = chunks.len() > 1;
            for (c_idx, context) in chunks.into_iter().enumerate() {
                let qid = if chunked {
                    format!("{}_p{:03}_c{:02}", q.id, p_idx, c_idx)
                } else {
                    format!("{}_p{:03}", q.id, p_idx)
                };
                let example = SquadExample {
                    qid,
                    question: q.body.clone(),
                    answers: locate_answers(context, &variants),
                    context: context.to_string(),
                    group_id: q.id.clone(),
                };
                example.check_answers()?;
                out.stats.pairs += 1;
                if example.is_impossible() {
                    out.stats.unanswerable_pairs += 1;
                    if !options.keep_unanswerable {
                        out.stats.dropped_unanswerable += 1;
                        continue;
                    }
                }
                out.examples.push(example);
            }
        }
    }
    out.examples.sort_by(|a, b| a.qid.cmp(&b.qid));
    Ok(out)
}

/// Every case-insensitive occurrence of every variant, ordered by offset.
/// Answer text is copied from the context so offsets validate exactly.
pub fn locate_answers(context: &str, variants: &[String]) -> Vec<SquadAnswer> {
    let offsets = CharOffsets::new(context);
    let mut hits = BTreeSet::new();
    for v in variants {
        for (s, e) in find_all_case_insensitive(context, v) {
            hits.insert((s, e));
        }
    }
    hits.into_iter()
        .map(|(s, e)| SquadAnswer {
            text: context[s..e].to_string(),
            answer_start: offsets.to_char(s).expect("match starts on a char boundary"),
        })
        .collect()
}

/// Splits a passage longer than `max_chars` into sentence-aligned chunks
/// that overlap by one sentence.
pub fn chunk_passage(passage: &str, max_chars: usize) -> Vec<&str> {
    if passage.chars().count() <= max_chars {
        return vec![passage];
    }
    let sentences = segment_sentences(passage);
    if sentences.len() <= 1 {
        return vec![passage];
    }
    let width = |from: usize, to: usize| {
        passage[sentences[from].char_start..sentences[to].char_end]
            .chars()
            .count()
    };
    let mut chunks = Vec::new();
    let mut first = 0;
    loop {
        let mut last = first;
        while last + 1 < sentences.len() && width(first, last + 1) <= max_chars {
            last += 1;
        }
        chunks.push(&passage[sentences[first].char_start..sentences[last].char_end]);
        if last + 1 >= sentences.len() {
            break;
        }
        // keep one sentence of overlap when it fits alongside the next one
        first = if width(last, last + 1) <= max_chars { last } else { last + 1 };
    }
    chunks
}

#[derive(Serialize, Deserialize)]
struct SquadFile {
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    data: Vec<SquadArticle>,
}

#[derive(Serialize, Deserialize)]
struct SquadArticle {
    title: String,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Serialize, Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Serialize, Deserialize)]
struct SidecarRecord {
    qid: String,
    group_id: String,
}

/// Writes SQuAD v1.1-style JSON (one article per group, one paragraph per
/// pair) and the `qid -> group_id` sidecar JSONL.
pub fn write_squad(
    examples: &[SquadExample],
    squad_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
    provenance: Option<serde_json::Value>,
) -> Result<()> {
    let mut articles: Vec<SquadArticle> = Vec::new();
    for ex in examples {
        let paragraph = SquadParagraph {
            context: ex.context.clone(),
            qas: vec![SquadQa {
                id: ex.qid.clone(),
                question: ex.question.clone(),
                answers: ex.answers.clone(),
            }],
        };
        match articles.last_mut() {
            Some(a) if a.title == ex.group_id => a.paragraphs.push(paragraph),
            _ => articles.push(SquadArticle {
                title: ex.group_id.clone(),
                paragraphs: vec![paragraph],
            }),
        }
    }
    let file = SquadFile {
        version: "1.1".to_string(),
        provenance,
        data: articles,
    };
    let squad_path = squad_path.as_ref();
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Invariant(format!("serializing SQuAD output: {e}")))?;
    fs::write(squad_path, json + "\n").map_err(|e| Error::io(squad_path, e))?;

    let sidecar_path = sidecar_path.as_ref();
    let mut lines = String::new();
    for ex in examples {
        let rec = SidecarRecord {
            qid: ex.qid.clone(),
            group_id: ex.group_id.clone(),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("plain strings serialize"));
        lines.push('\n');
    }
    fs::write(sidecar_path, lines).map_err(|e| Error::io(sidecar_path, e))
}

/// Reads back what [`write_squad`] wrote.
pub fn read_squad(squad_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Vec<SquadExample>> {
    let squad_path = squad_path.as_ref();
    let raw = fs::read_to_string(squad_path).map_err(|e| Error::io(squad_path, e))?;
    let file: SquadFile =
        serde_json::from_str(&raw).map_err(|e| Error::format(squad_path, e.line(), e.to_string()))?;
    let sidecar_path = sidecar_path.as_ref();
    let raw = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let mut groups = BTreeMap::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SidecarRecord =
            serde_json::from_str(line).map_err(|e| Error::format(sidecar_path, i + 1, e.to_string()))?;
        groups.insert(rec.qid, rec.group_id);
    }
    let mut out = Vec::new();
    for article in file.data {
        for para in article.paragraphs {
            for qa in para.qas {
                let group_id = groups.get(&qa.id).cloned().unwrap_or_else(|| article.title.clone());
                out.push(SquadExample {
                    qid: qa.id,
                    question: qa.question,
                    context: para.context.clone(),
                    answers: qa.answers,
                    group_id,
                });
            }
        }
    }
    Ok(out)
}

/// Official CovidQA release layout.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CovidQaFile {
    pub version: String,
    pub categories: Vec<CovidQaCategory>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CovidQaCategory {
    pub name: String,
    pub sub_categories: Vec<CovidQaSubCategory>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CovidQaSubCategory {
    /// Natural-language question.
    pub nq_name: String,
    /// Keyword query.
    pub kq_name: String,
    pub answers: Vec<CovidQaAnswer>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CovidQaAnswer {
    /// Document id (CORD-19 cord_uid).
    pub id: String,
    pub title: String,
    pub exact_answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuestionForm {
    #[default]
    Natural,
    Keyword,
}

impl CovidQaFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::format(path, e.line(), e.to_string()))
    }

    /// Every (question, answer) pair in file order.
    pub fn pairs(&self, form: QuestionForm) -> impl Iterator<Item = (&str, &CovidQaAnswer)> {
        self.categories
            .iter()
            .flat_map(|c| &c.sub_categories)
            .flat_map(move |s| {
                let q = match form {
                    QuestionForm::Natural => s.nq_name.as_str(),
                    QuestionForm::Keyword => s.kq_name.as_str(),
                };
                s.answers.iter().map(move |a| (q, a))
            })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs(QuestionForm::Natural).count()
    }

    pub fn num_questions(&self, form: QuestionForm) -> usize {
        self.pairs(form).map(|(q, _)| q).collect::<BTreeSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceQAExample {
    pub qid: String,
    pub question: String,
    pub doc_id: String,
    pub gold_sentence_indices: BTreeSet<usize>,
    pub gold_answer_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedPair {
    pub qid: String,
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct CovidQaLoad {
    pub examples: Vec<SentenceQAExample>,
    pub rejected: Vec<RejectedPair>,
}

/// Resolves every CovidQA pair against `corpus` and marks as gold the
/// sentences containing the exact answer (case- and whitespace-insensitive).
/// Pairs whose answer occurs in no sentence are rejected with a diagnostic.
pub fn load_covidqa(path: impl AsRef<Path>, corpus: &Corpus, form: QuestionForm) -> Result<CovidQaLoad> {
    resolve_covidqa(&CovidQaFile::load(path)?, corpus, form)
}

pub fn resolve_covidqa(file: &CovidQaFile, corpus: &Corpus, form: QuestionForm) -> Result<CovidQaLoad> {
    let missing: BTreeSet<&str> = file
        .pairs(form)
        .map(|(_, a)| a.id.as_str())
        .filter(|id| corpus.get(id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Resolution(missing.into_iter().map(String::from).collect()));
    }
    let mut out = CovidQaLoad::default();
    for (i, (question, answer)) in file.pairs(form).enumerate() {
        let qid = format!("covidqa-{i:04}");
        let doc = corpus.get(&answer.id).expect("resolved above");
        let needle = canonical_surface(&answer.exact_answer);
        let gold: BTreeSet<usize> = if needle.is_empty() {
            BTreeSet::new()
        } else {
            doc.sentences
                .iter()
                .filter(|s| canonical_surface(&doc.text[s.char_start..s.char_end]).contains(&needle))
                .map(|s| s.sent_index)
                .collect()
        };
        if gold.is_empty() {
            out.rejected.push(RejectedPair {
                qid,
                doc_id: answer.id.clone(),
                reason: format!("answer {:?} not found in any sentence", answer.exact_answer),
            });
            continue;
        }
        out.examples.push(SentenceQAExample {
            qid,
            question: question.to_string(),
            doc_id: answer.id.clone(),
            gold_sentence_indices: gold,
            gold_answer_text: answer.exact_answer.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    const MINI: &str = r#"{"questions":[
      {"id":"q1","type":"factoid","body":"What is the incubation period?",
       "exact_answer":[["6.4 days"],["six days"]],
       "snippets":[{"text":"The mean incubation period was 6.4 days."},
                   {"text":"Incubation lasted Six Days on average, and 6.4 DAYS at most."},
                   {"text":"No numbers reported here."}]},
      {"id":"q2","type":"list","body":"List symptoms.","exact_answer":[["fever"]],
       "snippets":[{"text":"fever"}]},
      {"id":"q3","type":"factoid","body":"Unanswerable?","exact_answer":"x","snippets":[]}
    ]}"#;

    fn keep() -> ConvertOptions {
        ConvertOptions {
            keep_unanswerable: true,
            ..Default::default()
        }
    }

    #[test]
    fn miniature_conversion() {
        let out = convert_bioasq_str(MINI, &keep()).unwrap();
        assert_eq!(out.examples.len(), 3);
        let answered: Vec<_> = out.examples.iter().filter(|e| !e.is_impossible()).collect();
        assert_eq!(answered.len(), 2);
        assert!(out.examples.iter().all(|e| e.group_id == "q1"));
        assert_eq!(out.examples[0].answers, [SquadAnswer { text: "6.4 days".into(), answer_start: 31 }]);
        // both variants found, in offset order
        let second: Vec<_> = out.examples[1].answers.iter().map(|a| a.text.as_str()).collect();
        assert_eq!(second, ["Six Days", "6.4 DAYS"]);
        assert!(out.examples[2].is_impossible());
        assert_eq!(out.stats.skipped_non_factoid, 1);
        assert_eq!(out.stats.skipped_without_passages, 1);
        assert_eq!(out.golds["q1"], ["6.4 days", "six days"]);

        let dropped = convert_bioasq_str(MINI, &ConvertOptions::default()).unwrap();
        assert_eq!(dropped.examples.len(), 2);
        assert_eq!(dropped.stats.dropped_unanswerable, 1);
    }

    #[test]
    fn non_factoid_contributes_nothing() {
        let json = r#"{"questions":[{"id":"l","type":"list","body":"b","exact_answer":[["a"]],"snippets":[{"text":"a"}]}]}"#;
        assert!(convert_bioasq_str(json, &keep()).unwrap().examples.is_empty());
    }

    #[test]
    fn repeated_answer_gets_all_offsets() {
        let ctx = "Median 6.4 days; reported 6.4 days again.";
        let hits = locate_answers(ctx, &["6.4 days".to_string()]);
        // brute-force oracle: every char position where the slice matches
        let chars: Vec<char> = ctx.chars().collect();
        let oracle: Vec<usize> = (0..chars.len())
            .filter(|&i| chars[i..].iter().take(8).collect::<String>().to_lowercase() == "6.4 days")
            .collect();
        assert_eq!(hits.iter().map(|h| h.answer_start).collect::<Vec<_>>(), oracle);
        assert_eq!(oracle, [7, 26]);
    }

    #[test]
    fn non_json_is_format_error() {
        assert!(matches!(convert_bioasq_str("not json", &keep()), Err(Error::Format { .. })));
    }

    #[test]
    fn non_ascii_offsets_are_characters() {
        let hits = locate_answers("Ülkü took IL-6 twice", &["il-6".into()]);
        assert_eq!(hits[0].answer_start, 10);
    }

    #[test]
    fn long_passages_are_chunked_with_overlap() {
        let passage = "Alpha one. Beta two. Gamma three. Delta four.";
        assert_eq!(
            chunk_passage(passage, 24),
            ["Alpha one. Beta two.", "Beta two. Gamma three.", "Gamma three. Delta four."]
        );
        // overlap is dropped when it cannot share a chunk with the next sentence
        assert_eq!(
            chunk_passage(passage, 21),
            ["Alpha one. Beta two.", "Gamma three.", "Delta four."]
        );
        assert_eq!(chunk_passage(passage, 1000), [passage]);
        // a single over-long sentence stays whole
        let chunks = chunk_passage(passage, 5);
        assert_eq!(chunks, ["Alpha one.", "Beta two.", "Gamma three.", "Delta four."]);
    }

    #[test]
    fn squad_roundtrip() {
        let out = convert_bioasq_str(MINI, &keep()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (s, m) = (dir.path().join("s.json"), dir.path().join("m.jsonl"));
        write_squad(&out.examples, &s, &m, Some(serde_json::json!({"x": 1}))).unwrap();
        assert_eq!(read_squad(&s, &m).unwrap(), out.examples);
    }

    fn covid_file() -> CovidQaFile {
        serde_json::from_str(
            r#"{"version":"0.0","categories":[{"name":"c","sub_categories":[
              {"nq_name":"What is the OR?","kq_name":"OR","answers":[
                {"id":"d1","title":"t","exact_answer":"OR=2.67"},
                {"id":"d2","title":"t","exact_answer":"hazard   ratio"}]},
              {"nq_name":"Absent?","kq_name":"absent","answers":[
                {"id":"d1","title":"t","exact_answer":"nowhere"}]}]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn covidqa_gold_sentences() {
        let corpus = Corpus::from_documents(vec![
            Document::new("d1", "Diabetes had OR=2.67 overall. Other data. In men OR=2.67 too."),
            Document::new("d2", "The Hazard ratio was high."),
        ])
        .unwrap();
        let f = covid_file();
        assert_eq!(f.num_pairs(), 3);
        assert_eq!(f.num_questions(QuestionForm::Natural), 2);
        let load = resolve_covidqa(&f, &corpus, QuestionForm::Natural).unwrap();
        assert_eq!(load.examples.len(), 2);
        assert_eq!(load.examples[0].gold_sentence_indices, BTreeSet::from([0, 2]));
        assert_eq!(load.examples[1].gold_sentence_indices, BTreeSet::from([0]));
        assert_eq!(load.rejected.len(), 1);
        assert_eq!(load.rejected[0].qid, "covidqa-0002");
    }

    #[test]
    fn covidqa_missing_documents() {
        let corpus = Corpus::from_documents(vec![Document::new("d1", "x")]).unwrap();
        match resolve_covidqa(&covid_file(), &corpus, QuestionForm::Natural) {
            Err(Error::Resolution(ids)) => assert_eq!(ids, ["d2"]),
            other => panic!("expected resolution error, got {other:?}"),
        }
    }
}
