//! Arabic orthographic normalization.
//!
//! Passes run in a fixed order: NFKC, alif unification, tatweel stripping,
//! ya unification. Later passes can expose sequences that NFKC would compose
//! (stripping a tatweel between a letter and a combining hamza, for
//! instance), so when NFKC is enabled the pipeline is repeated until the text
//! stops changing. Each extra round strictly shortens the text, so this
//! terminates quickly and makes [`normalize`] idempotent.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

pub const ALIF: char = '\u{0627}';
pub const ALIF_MADDA: char = '\u{0622}';
pub const ALIF_HAMZA_ABOVE: char = '\u{0623}';
pub const ALIF_HAMZA_BELOW: char = '\u{0625}';
pub const TATWEEL: char = '\u{0640}';
pub const ALIF_MAQSURA: char = '\u{0649}';
pub const YA: char = '\u{064A}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationConfig {
    pub nfkc: bool,
    pub alif_unify: bool,
    pub strip_tatweel: bool,
    pub ya_unify: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            nfkc: true,
            alif_unify: true,
            strip_tatweel: true,
            ya_unify: true,
        }
    }
}

impl NormalizationConfig {
    /// Every pass disabled; [`normalize`] becomes the identity.
    pub fn none() -> Self {
        Self {
            nfkc: false,
            alif_unify: false,
            strip_tatweel: false,
            ya_unify: false,
        }
    }

    fn is_identity(&self) -> bool {
        !(self.nfkc || self.alif_unify || self.strip_tatweel || self.ya_unify)
    }
}

/// Normalize `text` according to `cfg`.
pub fn normalize(text: &str, cfg: &NormalizationConfig) -> String {
    if cfg.is_identity() {
        return text.to_owned();
    }
    let mut current = single_pass(text, cfg);
    if !cfg.nfkc {
        return current;
    }
    loop {
        let next = single_pass(&current, cfg);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn single_pass(text: &str, cfg: &NormalizationConfig) -> String {
    let composed;
    let source = if cfg.nfkc {
        composed = text.nfkc().collect::<String>();
        composed.as_str()
    } else {
        text
    };
    source.chars().filter_map(|c| map_char(c, cfg)).collect()
}

#[inline]
fn map_char(c: char, cfg: &NormalizationConfig) -> Option<char> {
    match c {
        ALIF_MADDA | ALIF_HAMZA_ABOVE | ALIF_HAMZA_BELOW if cfg.alif_unify => Some(ALIF),
        TATWEEL if cfg.strip_tatweel => None,
        ALIF_MAQSURA if cfg.ya_unify => Some(YA),
        other => Some(other),
    }
}
