use std::fmt;

use serde::{Deserialize, Serialize};

use super::TokenizerModel;
use crate::error::TokenizerError;

/// Tokens emitted per whitespace-delimited word.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FertilityReport {
    pub word_count: usize,
    pub token_count: usize,
    pub fertility: f64,
}

impl FertilityReport {
    pub fn from_counts(word_count: usize, token_count: usize) -> Result<Self, TokenizerError> {
        if word_count == 0 {
            return Err(TokenizerError::EmptySample);
        }
        Ok(Self {
            word_count,
            token_count,
            fertility: token_count as f64 / word_count as f64,
        })
    }
}

impl fmt::Display for FertilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "word_count={} token_count={} fertility={:.2}",
            self.word_count, self.token_count, self.fertility
        )
    }
}

pub fn fertility(model: &TokenizerModel, text: &str) -> Result<FertilityReport, TokenizerError> {
    let words = text.split_whitespace().count();
    FertilityReport::from_counts(words, model.encode(text).len())
}

/// Base vs extended tokenizer on the same sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FertilityComparison {
    pub base: FertilityReport,
    pub extended: FertilityReport,
    /// Relative change in fertility, in percent (negative is a reduction).
    pub delta_pct: f64,
}

impl FertilityComparison {
    pub fn new(base: FertilityReport, extended: FertilityReport) -> Self {
        let delta_pct = (extended.fertility - base.fertility) / base.fertility * 100.0;
        Self {
            base,
            extended,
            delta_pct,
        }
    }
}

impl fmt::Display for FertilityComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "base:     {}", self.base)?;
        writeln!(f, "extended: {}", self.extended)?;
        write!(f, "delta:    {:+.1}%", self.delta_pct)
    }
}
