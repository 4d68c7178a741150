//! ChatML rendering, MD5 dedup and response-only label masking for SFT.
//!
//! Every turn renders as `<|im_start|>{role}\n{content}<|im_end|>\n`. Labels
//! keep the token id on assistant content and on the assistant's closing
//! `<|im_end|>`; every other position gets [`IGNORE_INDEX`].

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SftError};
use crate::tokenizer::{TokenId, TokenizerModel};
use crate::{md5_hex, Error};

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";
pub const IGNORE_INDEX: i32 = -100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: String,
    pub content: String,
}

impl Turn {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_owned(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub turns: Vec<Turn>,
}

impl InstructionExample {
    /// Check roles: an optional leading system turn, then user and assistant
    /// alternating (user first), with at least one assistant turn.
    pub fn validate(&self) -> Result<(), SftError> {
        let mut assistant = false;
        let mut expect_user = true;
        for (i, turn) in self.turns.iter().enumerate() {
            match turn.role.as_str() {
                "system" if i == 0 => {}
                "system" => return Err(SftError::BadTurnOrder(i)),
                "user" if expect_user => expect_user = false,
                "assistant" if !expect_user => {
                    expect_user = true;
                    assistant = true;
                }
                "user" | "assistant" => return Err(SftError::BadTurnOrder(i)),
                other => return Err(SftError::UnknownRole(other.to_owned())),
            }
        }
        if !assistant {
            return Err(SftError::NoAssistantTurn);
        }
        Ok(())
    }

    fn has_system(&self) -> bool {
        self.turns.first().is_some_and(|t| t.role == "system")
    }

    /// Turns as rendered: the example's own system turn, or `system_prompt`.
    fn effective_turns<'a>(
        &'a self,
        system_prompt: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a str)> {
        let injected = (!self.has_system()).then_some(("system", system_prompt));
        injected.into_iter().chain(
            self.turns
                .iter()
                .map(|t| (t.role.as_str(), t.content.as_str())),
        )
    }
}

fn render_unchecked(ex: &InstructionExample, system_prompt: &str) -> String {
    let mut out = String::new();
    for (role, content) in ex.effective_turns(system_prompt) {
        out.push_str(IM_START);
        out.push_str(role);
        out.push('\n');
        out.push_str(content);
        out.push_str(IM_END);
        out.push('\n');
    }
    out
}

pub fn render_chatml(ex: &InstructionExample, system_prompt: &str) -> Result<String, SftError> {
    ex.validate()?;
    Ok(render_unchecked(ex, system_prompt))
}

/// Keep the first example per distinct MD5 of its rendering; returns the
/// kept examples in input order and the number dropped.
pub fn dedup_md5(
    examples: &[InstructionExample],
    system_prompt: &str,
) -> (Vec<InstructionExample>, usize) {
    let digests: Vec<String> = examples
        .par_iter()
        .map(|ex| md5_hex(render_unchecked(ex, system_prompt).as_bytes()))
        .collect();
    let mut seen = HashSet::with_capacity(examples.len());
    let mut kept = Vec::with_capacity(examples.len());
    for (ex, digest) in examples.iter().zip(digests) {
        if seen.insert(digest) {
            kept.push(ex.clone());
        }
    }
    let dropped = examples.len() - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub total_tokens: u64,
    pub response_tokens: u64,
    pub mask_fraction: f64,
}

impl MaskReport {
    pub fn from_counts(total_tokens: u64, response_tokens: u64) -> Result<Self, SftError> {
        if response_tokens == 0 || response_tokens > total_tokens {
            return Err(SftError::NoResponseTokens);
        }
        Ok(Self {
            total_tokens,
            response_tokens,
            mask_fraction: response_tokens as f64 / total_tokens as f64,
        })
    }
}

impl std::fmt::Display for MaskReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total_tokens={} response_tokens={} mask_fraction={:.3}",
            self.total_tokens, self.response_tokens, self.mask_fraction
        )
    }
}

fn require_specials(model: &TokenizerModel) -> Result<(), SftError> {
    if model.added_id(IM_START).is_none() {
        return Err(SftError::MissingSpecial(IM_START));
    }
    if model.added_id(IM_END).is_none() {
        return Err(SftError::MissingSpecial(IM_END));
    }
    Ok(())
}

/// Token and label sequences for one example.
///
/// Each turn is encoded as four fragments (header, content, end marker,
/// newline) so span indices are exact; the ChatML markers are added tokens,
/// so the concatenation equals encoding the whole rendering at once.
pub fn encode_example(
    ex: &InstructionExample,
    model: &TokenizerModel,
    system_prompt: &str,
) -> Result<(Vec<i32>, Vec<i32>), SftError> {
    ex.validate()?;
    require_specials(model)?;
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut labels: Vec<i32> = Vec::new();
    let mut push = |tokens: &mut Vec<TokenId>, text: &str, unmasked: bool| {
        let from = tokens.len();
        model.encode_into(text, tokens);
        labels.extend(
            tokens[from..]
                .iter()
                .map(|&t| if unmasked { t as i32 } else { IGNORE_INDEX }),
        );
    };
    for (role, content) in ex.effective_turns(system_prompt) {
        let response = role == "assistant";
        push(&mut tokens, &format!("{IM_START}{role}\n"), false);
        push(&mut tokens, content, response);
        push(&mut tokens, IM_END, response);
        push(&mut tokens, "\n", false);
    }
    if tokens.len() != labels.len() {
        return Err(SftError::LengthDivergence {
            tokens: tokens.len(),
            labels: labels.len(),
        });
    }
    Ok((tokens.into_iter().map(|t| t as i32).collect(), labels))
}

/// Read a JSONL file of `{"turns": [...]}` objects.
pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<InstructionExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: InstructionExample =
            serde_json::from_str(&line).map_err(|e| SftError::BadExample {
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(ex);
    }
    Ok(out)
}

type Encoded = (Vec<i32>, Vec<i32>);

fn write_i32s(path: &Path, chunks: &[Encoded], pick: fn(&Encoded) -> &Vec<i32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    for item in chunks {
        let bytes: Vec<u8> = pick(item).iter().flat_map(|t| t.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Encode every example (in parallel, output in input order) and write the
/// token and label streams as little-endian `i32`.
pub fn pack_sft(
    examples: &[InstructionExample],
    model: &TokenizerModel,
    system_prompt: &str,
    out_tokens: impl AsRef<Path>,
    out_labels: impl AsRef<Path>,
) -> Result<MaskReport> {
    require_specials(model)?;
    let encoded = examples
        .par_iter()
        .map(|ex| encode_example(ex, model, system_prompt))
        .collect::<Result<Vec<_>, SftError>>()?;

    let total: u64 = encoded.iter().map(|(t, _)| t.len() as u64).sum();
    let labels_total: u64 = encoded.iter().map(|(_, l)| l.len() as u64).sum();
    if total != labels_total {
        return Err(SftError::LengthDivergence {
            tokens: total as usize,
            labels: labels_total as usize,
        }
        .into());
    }
    let response: u64 = encoded
        .iter()
        .map(|(_, l)| l.iter().filter(|&&x| x != IGNORE_INDEX).count() as u64)
        .sum();
    let report = MaskReport::from_counts(total, response)?;

    write_i32s(out_tokens.as_ref(), &encoded, |p| &p.0)?;
    write_i32s(out_labels.as_ref(), &encoded, |p| &p.1)?;
    Ok(report)
}
