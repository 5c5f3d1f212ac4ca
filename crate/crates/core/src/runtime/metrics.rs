use std::io::Write;

use serde::{Deserialize, Serialize};

use super::pipeline::Stage;
use crate::model::BlockKind;
use crate::Result;

/// One stage execution on one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub token_idx: u32,
    pub device: usize,
    pub layer: usize,
    pub block: Option<BlockKind>,
    pub stage: Stage,
    pub start: f64,
    pub end: f64,
}

/// Per decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMetrics {
    pub token_idx: u32,
    /// Token fed at this step.
    pub input: u32,
    /// Greedy choice from this step's logits.
    pub output: u32,
    /// Seconds from the step's start to the master knowing `output`.
    pub tpt: f64,
    /// L2 distance between distributed and dense logits.
    pub deviation: f64,
    pub relative_error: f64,
    /// Groups zero-filled across all relaxed gathers of the step.
    pub missing_groups: usize,
    /// True once the step produces a generated (not prompt) token.
    pub generated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub stages: Vec<StageRecord>,
    pub tokens: Vec<TokenMetrics>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Stage(&'a StageRecord),
    Token(&'a TokenMetrics),
}

impl Metrics {
    fn generated(&self) -> impl Iterator<Item = &TokenMetrics> {
        self.tokens.iter().filter(|t| t.generated)
    }

    /// Mean seconds per generated token.
    pub fn mean_tpt(&self) -> f64 {
        mean(self.generated().map(|t| t.tpt))
    }

    /// Mean logit deviation over every step.
    pub fn mean_deviation(&self) -> f64 {
        mean(self.tokens.iter().map(|t| t.deviation))
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tokens
            .iter()
            .map(|t| t.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn total_missing(&self) -> usize {
        self.tokens.iter().map(|t| t.missing_groups).sum()
    }

    /// One JSON object per line: stage records, then token records.
    pub fn write_json_lines(&self, mut w: impl Write) -> Result<()> {
        let lines = self
            .stages
            .iter()
            .map(Line::Stage)
            .chain(self.tokens.iter().map(Line::Token));
        for line in lines {
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
