//! JSONL datasets: one `{"tokens": [...], "answer_start": s, "answer_end": e}` per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TokenExample;
use crate::error::{KvwError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tokens: Vec<u32>,
    pub answer_start: usize,
    pub answer_end: usize,
}

impl TryFrom<&TokenExample> for DatasetRecord {
    type Error = KvwError;

    fn try_from(ex: &TokenExample) -> Result<Self> {
        let (answer_start, answer_end) = ex
            .answer_span()
            .ok_or_else(|| KvwError::Input("answer mask is not one contiguous span".into()))?;
        Ok(Self {
            tokens: ex.tokens.clone(),
            answer_start,
            answer_end,
        })
    }
}

pub fn read_dataset_str(text: &str) -> Result<Vec<TokenExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| KvwError::Input(format!("line {}: {e}", i + 1)))?;
        let ex = TokenExample::with_answer_span(rec.tokens, rec.answer_start, rec.answer_end)
            .map_err(|e| KvwError::Input(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<TokenExample>> {
    let text = fs::read_to_string(path).map_err(|e| KvwError::io(path, e))?;
    read_dataset_str(&text)
}

pub fn write_dataset_string(examples: &[TokenExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&DatasetRecord::try_from(ex)?)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[TokenExample]) -> Result<()> {
    let text = write_dataset_string(examples)?;
    fs::write(path, text).map_err(|e| KvwError::io(path, e))
}
