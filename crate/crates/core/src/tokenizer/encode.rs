use std::collections::HashMap;

use super::{TokenId, TokenizerModel};
use crate::error::TokenizerError;

/// Character trie over added-token surfaces.
#[derive(Debug, Clone, Default)]
pub(super) struct AddedMatcher {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: HashMap<char, u32>,
    token: Option<TokenId>,
}

impl AddedMatcher {
    pub(super) fn new<'a>(entries: impl IntoIterator<Item = (&'a str, TokenId)>) -> Self {
        let mut nodes = vec![Node::default()];
        for (surface, id) in entries {
            let mut at = 0usize;
            for c in surface.chars() {
                at = match nodes[at].children.get(&c) {
                    Some(&next) => next as usize,
                    None => {
                        nodes.push(Node::default());
                        let next = nodes.len() - 1;
                        nodes[at].children.insert(c, next as u32);
                        next
                    }
                };
            }
            nodes[at].token.get_or_insert(id);
        }
        Self { nodes }
    }

    fn is_empty(&self) -> bool {
        self.nodes[0].children.is_empty()
    }

    /// Longest added token that is a prefix of `text`: (byte length, id).
    fn longest_prefix(&self, text: &str) -> Option<(usize, TokenId)> {
        let mut at = 0usize;
        let mut best = None;
        for (i, c) in text.char_indices() {
            match self.nodes[at].children.get(&c) {
                Some(&next) => at = next as usize,
                None => break,
            }
            if let Some(id) = self.nodes[at].token {
                best = Some((i + c.len_utf8(), id));
            }
        }
        best
    }
}

#[inline]
fn is_line_break(c: char) -> bool {
    c == '\n' || c == '\r'
}

/// Split a span into pretokens. Horizontal whitespace attaches to the word
/// that follows it; each line-break character stands alone.
pub(crate) fn pretokenize(span: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut chars = span.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        if is_line_break(c) {
            chars.next();
            out.push(&span[start..start + c.len_utf8()]);
            continue;
        }
        let mut end = start;
        while let Some(&(i, c)) = chars.peek() {
            if c.is_whitespace() && !is_line_break(c) {
                end = i + c.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        while let Some(&(i, c)) = chars.peek() {
            if c.is_whitespace() {
                break;
            }
            end = i + c.len_utf8();
            chars.next();
        }
        out.push(&span[start..end]);
    }
    out
}

impl TokenizerModel {
    /// Encode `text` to ids. Never adds special tokens on its own.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        self.encode_into(text, &mut out);
        out
    }

    /// Append the encoding of `text` to `out`.
    pub fn encode_into(&self, text: &str, out: &mut Vec<TokenId>) {
        if self.matcher.is_empty() {
            self.encode_span(text, out);
            return;
        }
        let mut span_start = 0;
        let mut pos = 0;
        while pos < text.len() {
            if let Some((len, id)) = self.matcher.longest_prefix(&text[pos..]) {
                self.encode_span(&text[span_start..pos], out);
                out.push(id);
                pos += len;
                span_start = pos;
            } else {
                // Step one whole character.
                pos += text[pos..].chars().next().map_or(1, char::len_utf8);
            }
        }
        self.encode_span(&text[span_start..], out);
    }

    fn encode_span(&self, span: &str, out: &mut Vec<TokenId>) {
        let mut symbols = Vec::new();
        for pretoken in pretokenize(span) {
            symbols.clear();
            symbols.extend(pretoken.bytes().map(|b| self.byte_ids[b as usize]));
            self.merge_symbols(&mut symbols);
            out.extend_from_slice(&symbols);
        }
    }

    /// Apply merges bottom-up: repeatedly merge the adjacent pair with the
    /// lowest rank (leftmost on ties) until none applies.
    fn merge_symbols(&self, symbols: &mut Vec<TokenId>) {
        if self.merge_table.is_empty() {
            return;
        }
        loop {
            let mut best: Option<(u32, usize, TokenId)> = None;
            for (i, pair) in symbols.windows(2).enumerate() {
                if let Some(&(rank, merged)) = self.merge_table.get(&(pair[0], pair[1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, i, merged));
                    }
                }
            }
            match best {
                Some((_, i, merged)) => {
                    symbols[i] = merged;
                    symbols.remove(i + 1);
                }
                None => break,
            }
        }
    }

    /// Decode ids back into text.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut raw = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            raw.extend_from_slice(self.token_bytes(id).ok_or(TokenizerError::UnknownId(id))?);
        }
        Ok(match String::from_utf8(raw) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}
