//! Corpus interchange: JSON-lines records, one object per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::{Origin, TokenSeq};

/// One corpus line: `{"tokens": [...], "origin": "...", "seed": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: Vec<u32>,
    pub origin: Origin,
    pub seed: u64,
}

impl CorpusRecord {
    pub fn new(seq: &TokenSeq, seed: u64) -> Self {
        Self { tokens: seq.tokens.clone(), origin: seq.origin, seed }
    }

    pub fn to_seq(&self) -> Result<TokenSeq> {
        TokenSeq::new(self.tokens.clone(), self.origin)
    }
}

/// Sidecar metadata for exported watermarked corpora. Carries the key id,
/// never the key value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSidecar {
    pub key_id: String,
    pub records: usize,
    pub gen_len: usize,
    pub checkpoint: Option<String>,
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let records = vec![
            CorpusRecord { tokens: vec![1, 2, 3], origin: Origin::Watermarked, seed: 7 },
            CorpusRecord { tokens: vec![4], origin: Origin::Human, seed: 8 },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains("\"WATERMARKED\""));
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn blank_lines_are_skipped() {
        let text = "\n{\"tokens\":[1],\"origin\":\"PROMPT\",\"seed\":0}\n\n";
        let back = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].origin, Origin::Prompt);
    }
}
