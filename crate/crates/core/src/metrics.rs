//! Ranking metrics for extractive and sentence-level QA.
//!
//! Rankings are keyed by question (group) id. The question universe is the
//! gold set: a question without a ranking, or with an empty one, is a miss.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{CovidQaLoad, ConvertedDataset};
use crate::error::{Error, Result};
use crate::text::{normalize_answer, ANSWER_NORMALIZATION_VERSION};

/// MRR rank cutoff for answer-level (BioASQ) evaluation.
pub const ANSWER_MRR_CUTOFF: usize = 5;
pub const LENIENT_DEPTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CandidateKey {
    Text(String),
    Sentence(usize),
}

impl CandidateKey {
    fn normalized(&self) -> CandidateKey {
        match self {
            CandidateKey::Text(t) => CandidateKey::Text(normalize_answer(t)),
            CandidateKey::Sentence(i) => CandidateKey::Sentence(*i),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: CandidateKey,
    pub score: f64,
}

impl Candidate {
    pub fn text(text: impl Into<String>, score: f64) -> Self {
        Candidate {
            key: CandidateKey::Text(text.into()),
            score,
        }
    }

    pub fn sentence(index: usize, score: f64) -> Self {
        Candidate {
            key: CandidateKey::Sentence(index),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub qid: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Answers { answers: Vec<String> },
    Sentences { gold_sentence_indices: BTreeSet<usize> },
}

impl Gold {
    pub fn matches(&self, key: &CandidateKey) -> bool {
        match (self, key) {
            (Gold::Answers { answers }, CandidateKey::Text(t)) => {
                let t = normalize_answer(t);
                answers.iter().any(|a| normalize_answer(a) == t)
            }
            (Gold::Sentences { gold_sentence_indices }, CandidateKey::Sentence(i)) => {
                gold_sentence_indices.contains(i)
            }
            _ => false,
        }
    }
}

pub type Rankings = BTreeMap<String, RankedPrediction>;
pub type Golds = BTreeMap<String, Gold>;

/// Pools the candidates of every pair prediction sharing a `qid` (the group
/// id), merges candidates that normalize equally keeping the maximum score,
/// and sorts by descending score with ties broken by normalized key.
///
/// The surviving text of a merged candidate is the one carrying the maximum
/// score (the smallest such string on ties), so aggregation is idempotent
/// and independent of input order.
pub fn aggregate_passages(pairs: &[RankedPrediction]) -> Rankings {
    let mut pooled: BTreeMap<&str, BTreeMap<CandidateKey, (f64, CandidateKey)>> = BTreeMap::new();
    for pair in pairs {
        let group = pooled.entry(pair.qid.as_str()).or_default();
        for c in &pair.candidates {
            let entry = group
                .entry(c.key.normalized())
                .or_insert_with(|| (c.score, c.key.clone()));
            let better = c.score > entry.0 || (c.score == entry.0 && c.key < entry.1);
            if better {
                *entry = (c.score, c.key.clone());
            }
        }
    }
    let mut out = Rankings::new();
    for (qid, group) in pooled {
        if group.is_empty() {
            log::warn!("group {qid} has no candidates; omitted");
            continue;
        }
        let mut ranked: Vec<(CandidateKey, f64, CandidateKey)> =
            group.into_iter().map(|(norm, (s, k))| (norm, s, k)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.insert(
            qid.to_string(),
            RankedPrediction {
                qid: qid.to_string(),
                candidates: ranked
                    .into_iter()
                    .map(|(_, score, key)| Candidate { key, score })
                    .collect(),
            },
        );
    }
    out
}

/// 1-based rank of the first gold candidate.
pub fn first_gold_rank(ranking: Option<&RankedPrediction>, gold: &Gold) -> Option<usize> {
    ranking?
        .candidates
        .iter()
        .position(|c| gold.matches(&c.key))
        .map(|p| p + 1)
}

fn check_questions(rankings: &Rankings, golds: &Golds) -> Result<()> {
    if golds.is_empty() {
        return Err(Error::UndefinedMetric("empty question set".to_string()));
    }
    let orphans: Vec<&str> = rankings
        .keys()
        .filter(|q| !golds.contains_key(*q))
        .map(String::as_str)
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Precondition(format!(
            "rankings without gold: {}",
            orphans.join(", ")
        )));
    }
    Ok(())
}

fn ranks(rankings: &Rankings, golds: &Golds) -> Result<Vec<Option<usize>>> {
    check_questions(rankings, golds)?;
    Ok(golds
        .iter()
        .map(|(q, g)| first_gold_rank(rankings.get(q), g))
        .collect())
}

fn hit_rate(ranks: &[Option<usize>], depth: usize) -> f64 {
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= depth)).count();
    hits as f64 / ranks.len() as f64
}

pub fn mrr(rankings: &Rankings, golds: &Golds, cutoff: Option<usize>) -> Result<f64> {
    let ranks = ranks(rankings, golds)?;
    let total: f64 = ranks
        .iter()
        .map(|r| match r {
            Some(r) if cutoff.map_or(true, |c| *r <= c) => 1.0 / *r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

pub fn precision_at_1(rankings: &Rankings, golds: &Golds) -> Result<f64> {
    Ok(hit_rate(&ranks(rankings, golds)?, 1))
}

pub fn recall_at_3(rankings: &Rankings, golds: &Golds) -> Result<f64> {
    Ok(hit_rate(&ranks(rankings, golds)?, 3))
}

/// Strict (top-1) and lenient (top-5) accuracy against answer-string golds.
pub fn strict_lenient_acc(rankings: &Rankings, golds: &Golds) -> Result<(f64, f64)> {
    if golds.values().any(|g| !matches!(g, Gold::Answers { .. })) {
        return Err(Error::Precondition(
            "strict/lenient accuracy needs answer-string golds".to_string(),
        ));
    }
    let ranks = ranks(rankings, golds)?;
    Ok((hit_rate(&ranks, 1), hit_rate(&ranks, LENIENT_DEPTH)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Bioasq,
    Covidqa,
}

impl DatasetKind {
    pub fn mrr_cutoff(self) -> Option<usize> {
        match self {
            DatasetKind::Bioasq => Some(ANSWER_MRR_CUTOFF),
            DatasetKind::Covidqa => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub p_at_1: f64,
    pub r_at_3: f64,
    pub mrr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lenient_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: DatasetKind,
    pub questions: usize,
    pub mrr_cutoff: Option<usize>,
    pub normalization_version: String,
    pub metrics: MetricValues,
    /// Rank of the first gold candidate per question, null when absent.
    pub per_question: BTreeMap<String, Option<usize>>,
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl MetricsReport {
    pub fn check(&self) -> Result<()> {
        let m = &self.metrics;
        let mut values = vec![("p_at_1", m.p_at_1), ("r_at_3", m.r_at_3), ("mrr", m.mrr)];
        values.extend(m.strict_acc.map(|v| ("strict_acc", v)));
        values.extend(m.lenient_acc.map(|v| ("lenient_acc", v)));
        for (name, v) in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invariant(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if m.p_at_1 > m.r_at_3 {
            return Err(Error::Invariant(format!("P@1 {} > R@3 {}", m.p_at_1, m.r_at_3)));
        }
        if let (Some(s), Some(l)) = (m.strict_acc, m.lenient_acc) {
            if s > l {
                return Err(Error::Invariant(format!("SAcc {s} > LAcc {l}")));
            }
        }
        Ok(())
    }
}

/// Computes every metric applicable to the gold kind. Accuracy is reported
/// only for answer-string golds.
pub fn evaluate(dataset: DatasetKind, rankings: &Rankings, golds: &Golds) -> Result<MetricsReport> {
    let per_question: BTreeMap<String, Option<usize>> = {
        check_questions(rankings, golds)?;
        golds
            .iter()
            .map(|(q, g)| (q.clone(), first_gold_rank(rankings.get(q), g)))
            .collect()
    };
    let answer_level = golds.values().all(|g| matches!(g, Gold::Answers { .. }));
    let (strict_acc, lenient_acc) = if answer_level {
        let (s, l) = strict_lenient_acc(rankings, golds)?;
        (Some(s), Some(l))
    } else {
        (None, None)
    };
    let report = MetricsReport {
        dataset,
        questions: golds.len(),
        mrr_cutoff: dataset.mrr_cutoff(),
        normalization_version: ANSWER_NORMALIZATION_VERSION.to_string(),
        metrics: MetricValues {
            p_at_1: precision_at_1(rankings, golds)?,
            r_at_3: recall_at_3(rankings, golds)?,
            mrr: mrr(rankings, golds, dataset.mrr_cutoff())?,
            strict_acc,
            lenient_acc,
        },
        per_question,
        inputs: BTreeMap::new(),
        provenance: None,
    };
    report.check()?;
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentence_index: Option<usize>,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_id: Option<String>,
    candidates: Vec<CandidateRecord>,
}

/// Reads pair-level predictions JSONL. Each record is keyed by its
/// `group_id`, else by the group the `groups` map assigns to its `qid`, else
/// by the `qid` itself.
pub fn read_predictions(
    path: impl AsRef<Path>,
    groups: Option<&BTreeMap<String, String>>,
) -> Result<Vec<RankedPrediction>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::format(path, i + 1, m);
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let qid = match (rec.group_id, rec.qid) {
            (Some(g), _) => g,
            (None, Some(q)) => groups.and_then(|m| m.get(&q).cloned()).unwrap_or(q),
            (None, None) => return Err(bad("record has neither qid nor group_id".into())),
        };
        let mut candidates = Vec::with_capacity(rec.candidates.len());
        for c in rec.candidates {
            if !c.score.is_finite() {
                return Err(bad(format!("non-finite score {}", c.score)));
            }
            let key = match (c.text, c.sentence_index) {
                (Some(t), None) => CandidateKey::Text(t),
                (None, Some(s)) => CandidateKey::Sentence(s),
                _ => return Err(bad("candidate needs exactly one of text or sentence_index".into())),
            };
            candidates.push(Candidate { key, score: c.score });
        }
        out.push(RankedPrediction { qid, candidates });
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, predictions: &[RankedPrediction]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in predictions {
        let rec = PredictionRecord {
            qid: Some(p.qid.clone()),
            group_id: None,
            candidates: p
                .candidates
                .iter()
                .map(|c| match &c.key {
                    CandidateKey::Text(t) => CandidateRecord {
                        text: Some(t.clone()),
                        sentence_index: None,
                        score: c.score,
                    },
                    CandidateKey::Sentence(s) => CandidateRecord {
                        text: None,
                        sentence_index: Some(*s),
                        score: c.score,
                    },
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Invariant(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct GoldRecord {
    qid: String,
    #[serde(flatten)]
    gold: Gold,
}

/// Reads golds JSONL: `{"qid", "answers": [...]}` or
/// `{"qid", "gold_sentence_indices": [...]}` per line.
pub fn read_golds(path: impl AsRef<Path>) -> Result<Golds> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut golds = Golds::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GoldRecord =
            serde_json::from_str(line).map_err(|e| Error::format(path, i + 1, e.to_string()))?;
        if golds.insert(rec.qid.clone(), rec.gold).is_some() {
            return Err(Error::format(path, i + 1, format!("duplicate qid {}", rec.qid)));
        }
    }
    Ok(golds)
}

pub fn write_golds(path: impl AsRef<Path>, golds: &Golds) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (qid, gold) in golds {
        let rec = GoldRecord {
            qid: qid.clone(),
            gold: gold.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Invariant(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Answer-string golds per source question of a conversion.
pub fn bioasq_golds(dataset: &ConvertedDataset) -> Golds {
    dataset
        .golds
        .iter()
        .map(|(q, answers)| (q.clone(), Gold::Answers { answers: answers.clone() }))
        .collect()
}

/// Sentence golds per CovidQA pair.
pub fn covidqa_golds(load: &CovidQaLoad) -> Golds {
    load.examples
        .iter()
        .map(|e| {
            (
                e.qid.clone(),
                Gold::Sentences {
                    gold_sentence_indices: e.gold_sentence_indices.clone(),
                },
            )
        })
        .collect()
}
