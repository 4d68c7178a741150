//! Byte-level BPE tokenizer with an added-token pre-pass.
//!
//! The vocabulary stores pieces in their byte-unit spelling (see
//! [`bytes`]); added tokens store their literal surface text and are matched
//! greedily, longest first, before any BPE work happens.

pub mod bytes;
mod encode;
mod fertility;
mod io;

use std::collections::HashMap;
use std::path::Path;

pub use fertility::{fertility, FertilityComparison, FertilityReport};

use crate::error::{Result, TokenizerError};
use encode::AddedMatcher;

pub type TokenId = u32;

/// An added token: a surface string that always encodes to a single id.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AddedToken {
    pub content: String,
    pub id: TokenId,
}

/// Names of the special tokens, as they appear in the vocabulary or the
/// added-token list.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpecialTokens {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unk: Option<String>,
}

#[derive(Debug, Clone)]
enum Piece {
    Vocab { units: String, raw: Vec<u8> },
    Added(String),
}

impl Piece {
    fn raw(&self) -> &[u8] {
        match self {
            Piece::Vocab { raw, .. } => raw,
            Piece::Added(s) => s.as_bytes(),
        }
    }
}

/// An immutable byte-level BPE model.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    vocab: HashMap<String, TokenId>,
    pieces: Vec<Piece>,
    merges: Vec<(String, String)>,
    merge_table: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    added: Vec<AddedToken>,
    matcher: AddedMatcher,
    byte_ids: [TokenId; 256],
    specials: SpecialTokens,
    eos_id: Option<TokenId>,
    unk_id: Option<TokenId>,
    source_md5: Option<String>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.merges == other.merges
            && self.added == other.added
            && self.specials == other.specials
    }
}

impl TokenizerModel {
    /// Build and validate a model.
    ///
    /// `vocab` maps unit-spelled pieces to ids; `merges` are unit-spelled
    /// pairs in rank order. Added tokens either take fresh ids or alias a
    /// vocabulary entry with the same spelling.
    pub fn new(
        vocab: HashMap<String, TokenId>,
        merges: Vec<(String, String)>,
        mut added: Vec<AddedToken>,
        specials: SpecialTokens,
    ) -> Result<Self, TokenizerError> {
        let total = vocab
            .values()
            .copied()
            .chain(added.iter().map(|a| a.id))
            .max()
            .map_or(0, |m| m as usize + 1);
        let mut slots: Vec<Option<Piece>> = vec![None; total];

        let mut by_id: Vec<(&String, TokenId)> = vocab.iter().map(|(k, &v)| (k, v)).collect();
        by_id.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        for (units, id) in by_id {
            let slot = &mut slots[id as usize];
            if let Some(Piece::Vocab { units: first, .. }) = slot {
                return Err(TokenizerError::DuplicateId {
                    id,
                    first: first.clone(),
                    second: units.clone(),
                });
            }
            *slot = Some(Piece::Vocab {
                units: units.clone(),
                raw: bytes::decode_units(units),
            });
        }

        added.sort_by_key(|a| a.id);
        for tok in &added {
            if tok.content.is_empty() {
                return Err(TokenizerError::Malformed(format!(
                    "added token {} has empty content",
                    tok.id
                )));
            }
            let slot = &mut slots[tok.id as usize];
            match slot {
                None => *slot = Some(Piece::Added(tok.content.clone())),
                Some(Piece::Vocab { units, .. }) if *units == tok.content => {}
                Some(Piece::Vocab { units: first, .. }) | Some(Piece::Added(first)) => {
                    return Err(TokenizerError::DuplicateId {
                        id: tok.id,
                        first: first.clone(),
                        second: tok.content.clone(),
                    })
                }
            }
        }

        let mut pieces = Vec::with_capacity(total);
        for (id, slot) in slots.into_iter().enumerate() {
            pieces.push(slot.ok_or(TokenizerError::SparseIds(id as TokenId))?);
        }

        let mut byte_ids = [0; 256];
        for b in 0..=255u8 {
            let unit = bytes::byte_to_char(b).to_string();
            byte_ids[b as usize] = *vocab
                .get(&unit)
                .ok_or(TokenizerError::MissingByteToken(b))?;
        }

        let mut merge_table = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let l = *vocab
                .get(left)
                .ok_or_else(|| TokenizerError::MergeOperandMissing(left.clone()))?;
            let r = *vocab
                .get(right)
                .ok_or_else(|| TokenizerError::MergeOperandMissing(right.clone()))?;
            let joined = format!("{left}{right}");
            let merged = *vocab
                .get(&joined)
                .ok_or_else(|| TokenizerError::MergeNotInVocab {
                    left: left.clone(),
                    right: right.clone(),
                })?;
            merge_table.entry((l, r)).or_insert((rank as u32, merged));
        }

        let lookup = |name: &Option<String>| -> Result<Option<TokenId>, TokenizerError> {
            match name {
                None => Ok(None),
                Some(s) => added
                    .iter()
                    .find(|a| &a.content == s)
                    .map(|a| a.id)
                    .or_else(|| vocab.get(s).copied())
                    .map(Some)
                    .ok_or_else(|| TokenizerError::UnknownSpecial(s.clone())),
            }
        };
        let eos_id = lookup(&specials.eos)?;
        let unk_id = lookup(&specials.unk)?;

        let matcher = AddedMatcher::new(added.iter().map(|a| (a.content.as_str(), a.id)));
        Ok(Self {
            vocab,
            pieces,
            merges,
            merge_table,
            added,
            matcher,
            byte_ids,
            specials,
            eos_id,
            unk_id,
            source_md5: None,
        })
    }

    /// Total number of ids (vocabulary plus fresh added tokens).
    /// A model over the 256 byte units (ids 0..256 in byte order) plus the
    /// given unit-spelled merges, each new piece taking the next id, then
    /// `added` tokens on the ids after that.
    pub fn from_merges(
        merges: &[(&str, &str)],
        added: &[&str],
        specials: SpecialTokens,
    ) -> Result<Self, TokenizerError> {
        let mut vocab: HashMap<String, TokenId> = (0..=255u8)
            .map(|b| (bytes::byte_to_char(b).to_string(), b as TokenId))
            .collect();
        let mut next = 256;
        for (l, r) in merges {
            vocab.entry(format!("{l}{r}")).or_insert_with(|| {
                next += 1;
                next - 1
            });
        }
        let added = added
            .iter()
            .enumerate()
            .map(|(i, s)| AddedToken {
                content: s.to_string(),
                id: next + i as TokenId,
            })
            .collect();
        let merges = merges
            .iter()
            .map(|(l, r)| (l.to_string(), r.to_string()))
            .collect();
        TokenizerModel::new(vocab, merges, added, specials)
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Number of entries in the BPE vocabulary proper.
    pub fn base_vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn added_tokens(&self) -> &[AddedToken] {
        &self.added
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn eos_id(&self) -> Option<TokenId> {
        self.eos_id
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk_id
    }

    /// Id of a vocabulary piece given in unit spelling.
    pub fn piece_id(&self, units: &str) -> Option<TokenId> {
        self.vocab.get(units).copied()
    }

    /// Id of an added token by its surface text.
    pub fn added_id(&self, content: &str) -> Option<TokenId> {
        self.added
            .iter()
            .find(|a| a.content == content)
            .map(|a| a.id)
    }

    /// Raw bytes a token id decodes to.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Piece::raw)
    }

    /// True when `text` is the name of a configured special token.
    pub fn is_special(&self, text: &str) -> bool {
        self.specials.eos.as_deref() == Some(text) || self.specials.unk.as_deref() == Some(text)
    }

    /// A copy of this model with `surfaces` appended as added tokens on fresh,
    /// contiguous ids starting at [`vocab_size`](Self::vocab_size).
    pub fn with_added_tokens<I, S>(&self, surfaces: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut added = self.added.clone();
        for (id, s) in (self.vocab_size() as TokenId..).zip(surfaces) {
            added.push(AddedToken {
                content: s.into(),
                id,
            });
        }
        Self::new(
            self.vocab.clone(),
            self.merges.clone(),
            added,
            self.specials.clone(),
        )
    }

    /// Hex MD5 of the file this model was loaded from, or of its canonical
    /// serialization when it was built in memory.
    pub fn fingerprint(&self) -> String {
        match &self.source_md5 {
            Some(h) => h.clone(),
            None => crate::md5_hex(self.to_json_string().as_bytes()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        let text = String::from_utf8(raw)
            .map_err(|_| TokenizerError::Malformed(format!("{} is not UTF-8", path.display())))?;
        let mut model = Self::from_json_str(&text)?;
        model.source_md5 = Some(crate::md5_hex(text.as_bytes()));
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| crate::Error::io(path, e))
    }
}
