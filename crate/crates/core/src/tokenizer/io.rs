//! Tokenizer definition files.
//!
//! Native layout:
//!
//! ```json
//! { "vocab": {"a": 0, ...}, "merges": ["a b", ...],
//!   "added_tokens": [{"content": "<|im_end|>", "id": 300}],
//!   "special": {"eos": "<|im_end|>", "unk": null} }
//! ```
//!
//! The common single-file layout with `model.vocab`, `model.merges` and a
//! top-level `added_tokens` list is accepted as well; merges may be written
//! either as `"a b"` strings or as `["a", "b"]` pairs.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{AddedToken, Piece, SpecialTokens, TokenId, TokenizerModel};
use crate::error::TokenizerError;

#[derive(Deserialize)]
#[serde(untagged)]
enum MergeEntry {
    Joined(String),
    Pair(String, String),
}

impl MergeEntry {
    fn split(self) -> Result<(String, String), TokenizerError> {
        match self {
            MergeEntry::Pair(l, r) => Ok((l, r)),
            MergeEntry::Joined(s) => {
                let mut parts = s.splitn(2, ' ');
                match (parts.next(), parts.next()) {
                    (Some(l), Some(r)) if !l.is_empty() && !r.is_empty() && !r.contains(' ') => {
                        Ok((l.to_owned(), r.to_owned()))
                    }
                    _ => Err(TokenizerError::Malformed(format!(
                        "merge {s:?} is not \"left right\""
                    ))),
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct RawAdded {
    content: String,
    id: TokenId,
}

#[derive(Deserialize)]
struct RawModel {
    vocab: HashMap<String, TokenId>,
    #[serde(default)]
    merges: Vec<MergeEntry>,
}

#[derive(Deserialize)]
struct RawFile {
    vocab: Option<HashMap<String, TokenId>>,
    merges: Option<Vec<MergeEntry>>,
    model: Option<RawModel>,
    #[serde(default)]
    added_tokens: Vec<RawAdded>,
    #[serde(default)]
    special: SpecialTokens,
}

#[derive(Serialize)]
struct NativeFile<'a> {
    vocab: IndexMap<&'a str, TokenId>,
    merges: Vec<String>,
    added_tokens: &'a [AddedToken],
    special: &'a SpecialTokens,
}

impl TokenizerModel {
    pub fn from_json_str(text: &str) -> Result<Self, TokenizerError> {
        let raw: RawFile =
            serde_json::from_str(text).map_err(|e| TokenizerError::Malformed(e.to_string()))?;
        let (vocab, merges) = match (raw.vocab, raw.model) {
            (Some(vocab), _) => (vocab, raw.merges.unwrap_or_default()),
            (None, Some(model)) => (model.vocab, model.merges),
            (None, None) => {
                return Err(TokenizerError::Malformed(
                    "no `vocab` or `model.vocab` key".into(),
                ))
            }
        };
        let merges = merges
            .into_iter()
            .map(MergeEntry::split)
            .collect::<Result<Vec<_>, _>>()?;
        let added = raw
            .added_tokens
            .into_iter()
            .map(|a| AddedToken {
                content: a.content,
                id: a.id,
            })
            .collect();
        TokenizerModel::new(vocab, merges, added, raw.special)
    }

    /// Serialize in the native layout; vocabulary entries appear in id order.
    pub fn to_json_string(&self) -> String {
        let vocab = self
            .pieces
            .iter()
            .enumerate()
            .filter_map(|(id, p)| match p {
                Piece::Vocab { units, .. } => Some((units.as_str(), id as TokenId)),
                Piece::Added(_) => None,
            })
            .collect();
        let file = NativeFile {
            vocab,
            merges: self
                .merges
                .iter()
                .map(|(l, r)| format!("{l} {r}"))
                .collect(),
            added_tokens: &self.added,
            special: &self.specials,
        };
        serde_json::to_string(&file).expect("tokenizer serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::bytes::byte_to_char;
    use crate::tokenizer::testutil::byte_model;

    fn byte_vocab_json() -> String {
        let entries: Vec<String> = (0..=255u8)
            .map(|b| {
                format!(
                    "{}: {}",
                    serde_json::to_string(&byte_to_char(b).to_string()).unwrap(),
                    b
                )
            })
            .collect();
        entries.join(", ")
    }

    #[test]
    fn minimal_byte_file() {
        let text = format!(r#"{{"vocab": {{{}}}, "merges": []}}"#, byte_vocab_json());
        let m = TokenizerModel::from_json_str(&text).unwrap();
        assert_eq!(m.base_vocab_len(), 256);
        assert_eq!(m.vocab_size(), 256);
    }

    #[test]
    fn duplicate_id_in_file() {
        let text = format!(
            r#"{{"vocab": {{{}, "xy": 3}}, "merges": []}}"#,
            byte_vocab_json()
        );
        let err = TokenizerModel::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate token id"));
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(
            TokenizerModel::from_json_str("{"),
            Err(TokenizerError::Malformed(_))
        ));
        assert!(matches!(
            TokenizerModel::from_json_str("{}"),
            Err(TokenizerError::Malformed(_))
        ));
    }

    #[test]
    fn nested_layout_with_pair_merges() {
        let text = format!(
            r#"{{"model": {{"type": "BPE", "vocab": {{{}, "ab": 256}}, "merges": [["a", "b"]]}},
                "added_tokens": [{{"id": 257, "content": "<|endoftext|>", "special": true}}]}}"#,
            byte_vocab_json()
        );
        let m = TokenizerModel::from_json_str(&text).unwrap();
        assert_eq!(m.encode("ab<|endoftext|>"), vec![256, 257]);
    }

    #[test]
    fn save_load_roundtrip() {
        let specials = SpecialTokens {
            eos: Some("<|eos|>".into()),
            unk: Some("<|unk|>".into()),
        };
        let m = byte_model(
            &[("a", "b"), ("ab", "c")],
            &["<|eos|>", "<|unk|>", "كتاب"],
            specials,
        );
        let back = TokenizerModel::from_json_str(&m.to_json_string()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json_string(), m.to_json_string());
        assert_eq!(back.eos_id(), m.eos_id());
    }
}
