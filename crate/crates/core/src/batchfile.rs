//! Batch files: a header describing how the batches were made, followed by
//! one record per masked example.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! b"BEMBATCH" | u32 version | u32 header_len | header JSON
//! repeated:  u32 record_len | u64 batch_index | u64 example_index
//!            | u32 n | n x u32 input_ids | n x i32 label_ids | n x u8 attention_mask
//!            | u32 m | m x u32 masked_positions
//! ```
//!
//! The JSONL variant has the header object on the first line and one record
//! object per following line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{MaskedBatch, MaskedExample, MaskingConfig, IGNORE_INDEX};
use crate::tokenizer::Vocab;

pub const BATCH_MAGIC: &[u8; 8] = b"BEMBATCH";
pub const BATCH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchFormat {
    Binary,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFileHeader {
    pub format: String,
    pub version: u32,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub ignore_index: i32,
    pub seed: u64,
    pub config: MaskingConfig,
    #[serde(default)]
    pub provenance: Option<serde_json::Value>,
}

impl BatchFileHeader {
    pub fn new(vocab: &Vocab, config: &MaskingConfig, provenance: Option<serde_json::Value>) -> Self {
        BatchFileHeader {
            format: "bem-batches".to_string(),
            version: BATCH_VERSION,
            vocab_hash: vocab.fingerprint(),
            vocab_size: vocab.len(),
            ignore_index: IGNORE_INDEX,
            seed: config.seed,
            config: config.clone(),
            provenance,
        }
    }
}

pub fn write_batches(
    path: impl AsRef<Path>,
    format: BatchFormat,
    header: &BatchFileHeader,
    batches: &[MaskedBatch],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Invariant(format!("serializing batch header: {e}")))?;
    let io = |e| Error::io(path, e);
    match format {
        BatchFormat::Binary => {
            out.write_all(BATCH_MAGIC).map_err(io)?;
            out.write_all(&BATCH_VERSION.to_le_bytes()).map_err(io)?;
            out.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(io)?;
            out.write_all(&header_json).map_err(io)?;
            let mut buf = Vec::new();
            for ex in batches.iter().flat_map(|b| &b.examples) {
                buf.clear();
                encode_record(ex, &mut buf);
                out.write_all(&(buf.len() as u32).to_le_bytes()).map_err(io)?;
                out.write_all(&buf).map_err(io)?;
            }
        }
        BatchFormat::Jsonl => {
            out.write_all(&header_json).map_err(io)?;
            out.write_all(b"\n").map_err(io)?;
            for ex in batches.iter().flat_map(|b| &b.examples) {
                let line = serde_json::to_vec(ex)
                    .map_err(|e| Error::Invariant(format!("serializing record: {e}")))?;
                out.write_all(&line).map_err(io)?;
                out.write_all(b"\n").map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

fn encode_record(ex: &MaskedExample, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&ex.batch_index.to_le_bytes());
    buf.extend_from_slice(&ex.example_index.to_le_bytes());
    buf.extend_from_slice(&(ex.input_ids.len() as u32).to_le_bytes());
    for id in &ex.input_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for label in &ex.label_ids {
        buf.extend_from_slice(&label.to_le_bytes());
    }
    buf.extend_from_slice(&ex.attention_mask);
    buf.extend_from_slice(&(ex.masked_positions.len() as u32).to_le_bytes());
    for p in &ex.masked_positions {
        buf.extend_from_slice(&p.to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.data.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn decode_record(data: &[u8]) -> Option<MaskedExample> {
    let mut c = Cursor { data, at: 0 };
    let batch_index = c.u64()?;
    let example_index = c.u64()?;
    let n = c.u32()? as usize;
    let input_ids = c
        .take(n.checked_mul(4)?)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let label_ids = c
        .take(n * 4)?
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let attention_mask = c.take(n)?.to_vec();
    let m = c.u32()? as usize;
    let masked_positions = c
        .take(m.checked_mul(4)?)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    (c.at == data.len()).then_some(MaskedExample {
        input_ids,
        label_ids,
        attention_mask,
        masked_positions,
        batch_index,
        example_index,
    })
}

/// Reads either format, detected from the leading magic bytes.
pub fn read_batch_file(path: impl AsRef<Path>) -> Result<(BatchFileHeader, Vec<MaskedExample>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    if head.starts_with(BATCH_MAGIC) {
        let mut data = Vec::new();
        reader.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
        read_binary(path, &data)
    } else {
        read_jsonl(path, reader)
    }
}

fn read_binary(path: &Path, data: &[u8]) -> Result<(BatchFileHeader, Vec<MaskedExample>)> {
    let corrupt = |what: &str| Error::format(path, 0, format!("corrupt batch file: {what}"));
    let mut c = Cursor { data, at: BATCH_MAGIC.len() };
    let version = c.u32().ok_or_else(|| corrupt("truncated version"))?;
    if version != BATCH_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = c.u32().ok_or_else(|| corrupt("truncated header length"))? as usize;
    let header_bytes = c.take(header_len).ok_or_else(|| corrupt("truncated header"))?;
    let header: BatchFileHeader =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(&e.to_string()))?;
    let mut examples = Vec::new();
    while c.at < data.len() {
        let len = c.u32().ok_or_else(|| corrupt("truncated record length"))? as usize;
        let body = c.take(len).ok_or_else(|| corrupt("truncated record"))?;
        examples.push(decode_record(body).ok_or_else(|| corrupt("malformed record"))?);
    }
    Ok((header, examples))
}

fn read_jsonl(path: &Path, reader: impl BufRead) -> Result<(BatchFileHeader, Vec<MaskedExample>)> {
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, 1, "missing header")),
    };
    let header: BatchFileHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::format(path, 1, e.to_string()))?;
    let mut examples = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line).map_err(|e| Error::format(path, i + 1, e.to_string()))?);
    }
    Ok((header, examples))
}

/// Regroups flat records into batches by `batch_index`, preserving order.
pub fn group_into_batches(examples: Vec<MaskedExample>) -> Vec<MaskedBatch> {
    let mut batches: Vec<MaskedBatch> = Vec::new();
    for ex in examples {
        match batches.last_mut() {
            Some(b) if b.batch_index == ex.batch_index => b.examples.push(ex),
            _ => batches.push(MaskedBatch {
                batch_index: ex.batch_index,
                subset: None,
                examples: vec![ex],
            }),
        }
    }
    batches
}
