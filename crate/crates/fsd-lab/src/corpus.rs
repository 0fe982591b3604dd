//! Prompt corpus: one JSON record per line,
//! `{"id":"q1","tokens":[3,1,4],"split":"test"}`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use fsd_core::prob::TokenId;
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    pub split: Split,
}

impl PromptRecord {
    pub fn token_ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|&t| TokenId(t)).collect()
    }

    /// Stream id for this prompt's rng, derived from the token content so
    /// that identical prompts decode identically regardless of their
    /// position in a prompt set (FNV-1a over the token bytes).
    pub fn stream_id(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for &t in &self.tokens {
            for b in t.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<PromptRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&PromptRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rejects tokens at or above `vocab_size`. Called at the start of
    /// the first run referencing the corpus.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for r in &self.records {
            for &t in &r.tokens {
                if t as usize >= vocab_size {
                    return Err(LabError::TokenOutOfRange {
                        token: t,
                        vocab_size,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    read_corpus(BufReader::new(file))
}

pub fn read_corpus<R: Read>(reader: BufReader<R>) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: PromptRecord =
            serde_json::from_str(&line).map_err(|e| LabError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(LabError::Parse {
                line: lineno,
                message: format!("duplicate id '{}'", record.id),
            });
        }
        records.push(record);
    }
    Ok(Corpus { records })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &corpus.records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;

    fn parse(s: &str) -> Result<Corpus> {
        read_corpus(BufReader::new(s.as_bytes()))
    }

    #[test]
    fn empty_file_is_valid() {
        let c = parse("").unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn roundtrip_record() {
        let c = parse(r#"{"id":"q1","tokens":[3,1,4],"split":"test"}"#).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.records[0].tokens, vec![3, 1, 4]);
        assert_eq!(c.records[0].split, Split::Test);
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = parse(concat!(
            r#"{"id":"q1","tokens":[0],"split":"train"}"#,
            "\n",
            r#"{"id":"q1","tokens":[1],"split":"test"}"#
        ))
        .unwrap_err();
        assert!(matches!(err, LabError::Parse { line: 2, .. }));
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse("{\"id\":\"a\",\"tokens\":[0],\"split\":\"train\"}\nnot json").unwrap_err();
        assert!(matches!(err, LabError::Parse { line: 2, .. }));
    }

    #[test]
    fn vocab_check() {
        let c = parse(r#"{"id":"q1","tokens":[3,1,4],"split":"test"}"#).unwrap();
        assert!(c.check_vocab(5).is_ok());
        assert!(matches!(
            c.check_vocab(4),
            Err(LabError::TokenOutOfRange { token: 4, .. })
        ));
    }
}
