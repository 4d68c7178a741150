//! Shared fixtures for the benchmarks.

use surgeon_core::pack::TokenStream;
use surgeon_core::tensorstore::{Dtype, TensorRecord, TensorStore};
use surgeon_core::tokenizer::SpecialTokens;
use surgeon_core::TokenizerModel;

/// Byte-level model with merges for common Arabic letter pairs and a few
/// Latin ones, plus an eos token.
pub fn arabic_model() -> TokenizerModel {
    let letters: Vec<String> = ('\u{0627}'..='\u{064A}')
        .filter(|c| c.is_alphabetic())
        .map(units)
        .collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    // First join each letter's two UTF-8 bytes, then pair up frequent letters.
    for l in &letters {
        let mut cs = l.chars();
        merges.push((
            cs.next().unwrap().to_string(),
            cs.next().unwrap().to_string(),
        ));
    }
    for a in letters.iter().take(8) {
        for b in letters.iter().take(8) {
            merges.push((a.clone(), b.clone()));
        }
    }
    merges.push(("t".into(), "h".into()));
    merges.push(("th".into(), "e".into()));
    let pairs: Vec<(&str, &str)> = merges
        .iter()
        .map(|(l, r)| (l.as_str(), r.as_str()))
        .collect();
    let specials = SpecialTokens {
        eos: Some("<|endoftext|>".into()),
        unk: None,
    };
    TokenizerModel::from_merges(&pairs, &["<|endoftext|>"], specials).expect("valid fixture model")
}

fn units(c: char) -> String {
    let mut buf = [0u8; 4];
    surgeon_core::tokenizer::bytes::encode_bytes(c.encode_utf8(&mut buf).as_bytes())
}

/// Roughly `bytes` of mixed Arabic and Latin prose.
pub fn sample_text(bytes: usize) -> String {
    let base =
        "ذهب الطالب الى المدرسة صباحا وقرأ كتابا جديدا عن تاريخ العلوم the quick brown fox 2024\n";
    base.repeat(bytes / base.len() + 1)
}

/// Synthetic stream: documents of 50..=2000 tokens, each ending in eos.
pub fn synthetic_stream(tokens: usize, eos: i32) -> TokenStream {
    let mut ids = Vec::with_capacity(tokens);
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    while ids.len() < tokens {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let doc = 50 + (state % 1951) as usize;
        for k in 0..doc.min(tokens - ids.len()) {
            ids.push(if k + 1 == doc {
                eos
            } else {
                3 + ((state >> 11) as i32 + k as i32) % 150_000
            });
        }
    }
    TokenStream::from_ids(&ids, eos)
}

/// A store with one `[rows, cols]` tensor of the given dtype.
pub fn matrix_store(rows: usize, cols: usize, dtype: Dtype, seed: f32) -> TensorStore {
    let values: Vec<f32> = (0..rows * cols)
        .map(|i| ((i as f32 * 0.618 + seed).sin()) * 0.05)
        .collect();
    let mut s = TensorStore::new();
    s.insert(
        "w",
        TensorRecord::from_f32("w", dtype, vec![rows, cols], &values).expect("fixture shape"),
    )
    .expect("fresh store");
    s
}
