//! Loss arithmetic for post-training: response-masked cross-entropy,
//! perplexity and the DPO objective. Inputs are precomputed log-probs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MetricsError, Result};
use crate::sft::IGNORE_INDEX;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskedLogProbs {
    /// Log-probability of the realized target at each position.
    pub token_logprobs: Vec<f64>,
    pub labels: Vec<i32>,
}

impl MaskedLogProbs {
    pub fn new(token_logprobs: Vec<f64>, labels: Vec<i32>) -> Result<Self, MetricsError> {
        if token_logprobs.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                logprobs: token_logprobs.len(),
                labels: labels.len(),
            });
        }
        Ok(Self {
            token_logprobs,
            labels,
        })
    }

    /// Read parallel files: little-endian `f64` log-probs and `i32` labels.
    pub fn read(logprobs: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let (lp_path, lb_path) = (logprobs.as_ref(), labels.as_ref());
        let lp = std::fs::read(lp_path).map_err(|e| Error::io(lp_path, e))?;
        let lb = std::fs::read(lb_path).map_err(|e| Error::io(lb_path, e))?;
        if lp.len() % 8 != 0 || lb.len() % 4 != 0 {
            return Err(MetricsError::LengthMismatch {
                logprobs: lp.len() / 8,
                labels: lb.len() / 4,
            }
            .into());
        }
        let token_logprobs = lp
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let labels = lb
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self::new(token_logprobs, labels)?)
    }
}

/// Mean negative log-likelihood over positions whose label is not the
/// ignore sentinel.
pub fn masked_ce(mlp: &MaskedLogProbs) -> Result<f64, MetricsError> {
    if mlp.token_logprobs.len() != mlp.labels.len() {
        return Err(MetricsError::LengthMismatch {
            logprobs: mlp.token_logprobs.len(),
            labels: mlp.labels.len(),
        });
    }
    let (sum, count) = mlp
        .token_logprobs
        .iter()
        .zip(&mlp.labels)
        .filter(|(_, &l)| l != IGNORE_INDEX)
        .fold((0.0f64, 0usize), |(s, n), (&lp, _)| (s + lp, n + 1));
    if count == 0 {
        return Err(MetricsError::NoSupervisedPositions);
    }
    Ok(-sum / count as f64)
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Summed sequence log-probs for one preference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    pub policy_chosen_lp: f64,
    pub policy_rejected_lp: f64,
    pub ref_chosen_lp: f64,
    pub ref_rejected_lp: f64,
}

impl DpoPair {
    pub fn equal(lp: f64) -> Self {
        Self {
            policy_chosen_lp: lp,
            policy_rejected_lp: lp,
            ref_chosen_lp: lp,
            ref_rejected_lp: lp,
        }
    }

    /// β-scaled implicit reward margin.
    pub fn margin(&self, beta: f64) -> f64 {
        beta * ((self.policy_chosen_lp - self.policy_rejected_lp)
            - (self.ref_chosen_lp - self.ref_rejected_lp))
    }

    /// `-log σ(m)`.
    pub fn loss(&self, beta: f64) -> f64 {
        softplus(-self.margin(beta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoBatch {
    pub pairs: Vec<DpoPair>,
    pub beta: f64,
}

impl DpoBatch {
    /// Read pairs from JSONL, one [`DpoPair`] object per line.
    pub fn read_jsonl(path: impl AsRef<Path>, beta: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: DpoPair = serde_json::from_str(line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
            pairs.push(pair);
        }
        Ok(Self { pairs, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoStats {
    pub loss: f64,
    pub mean_margin: f64,
    pub reward_accuracy: f64,
}

pub fn dpo_loss(batch: &DpoBatch) -> Result<DpoStats, MetricsError> {
    if batch.pairs.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    if !(batch.beta > 0.0 && batch.beta.is_finite()) {
        return Err(MetricsError::BadBeta(batch.beta));
    }
    let n = batch.pairs.len() as f64;
    let (mut loss, mut margin, mut wins) = (0.0f64, 0.0f64, 0.0f64);
    for pair in &batch.pairs {
        let m = pair.margin(batch.beta);
        loss += softplus(-m);
        margin += m;
        wins += match m.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        };
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(MetricsError::NonFiniteLoss);
    }
    Ok(DpoStats {
        loss,
        mean_margin: margin / n,
        reward_accuracy: wins / n,
    })
}
