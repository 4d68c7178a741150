//! Non-GPU machinery for adapting a byte-level BPE language model to a new
//! script: vocabulary injection with mean-subtoken embedding init, packed
//! pretraining and SFT data, checkpoint merging, post-training loss math and
//! quantized footprint estimates.

pub mod error;
pub mod inject;
pub mod merge;
pub mod metrics;
pub mod pack;
pub mod quant;
pub mod sft;
pub mod surgery;
pub mod tensorstore;
pub mod textnorm;
pub mod tokenizer;

pub use error::{Error, Result};
pub use textnorm::{normalize, NormalizationConfig};
pub use tokenizer::{FertilityReport, TokenId, TokenizerModel};

/// Lowercase hex MD5 digest.
pub fn md5_hex(data: &[u8]) -> String {
    use md5::{Digest, Md5};
    Md5::digest(data)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
