//! Dedup-merge of candidate pieces into a base tokenizer.
//!
//! A candidate survives only if the base tokenizer needs more than one token
//! for it and no earlier candidate already claimed the same surface.
//! Survivors become added tokens on contiguous ids after the base vocabulary,
//! in candidate order.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{InjectError, Result};
use crate::tokenizer::{TokenId, TokenizerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Candidate surfaces in export order. Duplicates are kept here and
/// collapsed (and counted) by [`dedup_merge`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePieceList {
    pub pieces: Vec<Candidate>,
}

impl CandidatePieceList {
    pub fn from_surfaces<I, S>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            pieces: surfaces
                .into_iter()
                .map(|s| Candidate {
                    surface: s.into(),
                    score: None,
                })
                .collect(),
        }
    }

    /// Parse the line format: one piece per line, optionally followed by a
    /// TAB and a score. Empty lines are skipped.
    pub fn parse(text: &str) -> Result<Self, InjectError> {
        let mut pieces = Vec::new();
        for (idx, line) in text.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let (surface, score) = match line.rsplit_once('\t') {
                Some((s, sc)) => {
                    let score = sc
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| InjectError::BadScore {
                            line: idx + 1,
                            score: sc.to_owned(),
                        })?;
                    (s, Some(score))
                }
                None => (line, None),
            };
            if surface.is_empty() {
                return Err(InjectError::EmptyPiece(idx + 1));
            }
            pieces.push(Candidate {
                surface: surface.to_owned(),
                score,
            });
        }
        Ok(Self { pieces })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// A kept piece and the id it received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewToken {
    pub id: TokenId,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub candidates: usize,
    pub discarded_single_token: usize,
    pub discarded_duplicate: usize,
    pub net_new: usize,
    pub v_old: usize,
    pub v_new: usize,
    pub new_token_ids: Vec<TokenId>,
    pub new_tokens: Vec<NewToken>,
}

impl InjectionReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| crate::Error::json(path.display().to_string(), e))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// True iff `piece` already encodes to exactly one base token.
pub fn roundtrip_single(base: &TokenizerModel, piece: &str) -> bool {
    base.encode(piece).len() == 1
}

pub fn dedup_merge(
    base: &TokenizerModel,
    cands: &CandidatePieceList,
) -> Result<(TokenizerModel, InjectionReport), InjectError> {
    let v_old = base.vocab_size();
    let mut kept: Vec<&Candidate> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut single = 0;
    let mut duplicate = 0;

    for cand in &cands.pieces {
        if base.is_special(&cand.surface) {
            return Err(InjectError::SpecialCollision(cand.surface.clone()));
        }
        if seen.contains(cand.surface.as_str()) {
            duplicate += 1;
        } else if roundtrip_single(base, &cand.surface) {
            single += 1;
        } else {
            seen.insert(&cand.surface);
            kept.push(cand);
        }
    }

    let extended = if kept.is_empty() {
        base.clone()
    } else {
        base.with_added_tokens(kept.iter().map(|c| c.surface.clone()))
            .expect("fresh contiguous ids always validate")
    };

    let new_tokens: Vec<NewToken> = kept
        .iter()
        .enumerate()
        .map(|(i, c)| NewToken {
            id: (v_old + i) as TokenId,
            content: c.surface.clone(),
            score: c.score,
        })
        .collect();
    let report = InjectionReport {
        candidates: cands.len(),
        discarded_single_token: single,
        discarded_duplicate: duplicate,
        net_new: kept.len(),
        v_old,
        v_new: v_old + kept.len(),
        new_token_ids: new_tokens.iter().map(|t| t.id).collect(),
        new_tokens,
    };
    Ok((extended, report))
}
