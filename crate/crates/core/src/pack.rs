//! Pretraining corpus as a flat token file, and window sampling over it.
//!
//! The corpus is one file of little-endian `i32` ids, every document
//! terminated by EOS, plus a `<name>.meta.json` sidecar. Training windows are
//! fixed-length slices at pseudo-random offsets; each window carries
//! `cu_seqlens`, the cumulative segment boundaries implied by the EOS
//! positions inside it, so varlen attention never crosses documents.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use memmap2::Mmap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PackError, Result};
use crate::textnorm::{normalize, NormalizationConfig};
use crate::tokenizer::TokenizerModel;
use crate::Error;

const DOC_CHUNK: usize = 256;

/// The SplitMix64 output function for a given state: add the golden-ratio
/// increment, then finalize.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Window start for `(seed, rank, step)` over a stream of `token_count`
/// tokens; uniform over the `token_count - len + 1` valid offsets.
pub fn window_start(seed: u64, rank: u64, step: u64, token_count: usize, len: usize) -> usize {
    debug_assert!(len >= 1 && len <= token_count);
    let key = seed ^ rank.rotate_left(17) ^ step.rotate_left(31);
    (splitmix64(key) % (token_count - len + 1) as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStreamMeta {
    pub token_count: usize,
    pub eos_id: i32,
    /// Hex MD5 of the tokenizer definition used for packing.
    pub tokenizer_fingerprint: String,
    /// Number of documents packed.
    pub created_from: usize,
}

enum Backing {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

/// A packed token corpus, memory-mapped when opened from disk.
pub struct TokenStream {
    path: Option<PathBuf>,
    backing: Backing,
    pub meta: TokenStreamMeta,
}

impl std::fmt::Debug for TokenStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenStream")
            .field("path", &self.path)
            .field("meta", &self.meta)
            .finish()
    }
}

/// Sidecar path: `dir/name.bin` -> `dir/name.meta.json`.
pub fn meta_path(stream: &Path) -> PathBuf {
    stream.with_extension("meta.json")
}

impl TokenStream {
    /// An in-memory stream, mostly for tests and tools that synthesize ids.
    pub fn from_ids(ids: &[i32], eos_id: i32) -> Self {
        let bytes = ids.iter().flat_map(|t| t.to_le_bytes()).collect();
        Self {
            path: None,
            backing: Backing::Owned(bytes),
            meta: TokenStreamMeta {
                token_count: ids.len(),
                eos_id,
                tokenizer_fingerprint: String::new(),
                created_from: ids.iter().filter(|&&t| t == eos_id).count(),
            },
        }
    }

    /// Map `path` and read its sidecar.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mpath = meta_path(path);
        let meta_text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: TokenStreamMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::json(mpath.display().to_string(), e))?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len % 4 != 0 {
            return Err(PackError::RaggedFile(len).into());
        }
        if len / 4 != meta.token_count as u64 {
            return Err(PackError::MetaMismatch {
                meta: meta.token_count,
                file: len / 4,
            }
            .into());
        }
        let backing = if len == 0 {
            Backing::Owned(Vec::new())
        } else {
            // SAFETY: the file is opened read-only and treated as immutable
            // for the life of the map; concurrent truncation by another
            // process is outside this tool's contract.
            Backing::Mapped(unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?)
        };
        Ok(Self {
            path: Some(path.to_path_buf()),
            backing,
            meta,
        })
    }

    /// Write raw ids plus a sidecar. Used by tooling that already has ids.
    pub fn write_ids(path: impl AsRef<Path>, ids: &[i32], meta: &TokenStreamMeta) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::with_capacity(1 << 20, file);
        for chunk in ids.chunks(1 << 16) {
            let bytes: Vec<u8> = chunk.iter().flat_map(|t| t.to_le_bytes()).collect();
            w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        write_meta(path, meta)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn bytes(&self) -> &[u8] {
        match &self.backing {
            Backing::Mapped(m) => m,
            Backing::Owned(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.meta.token_count
    }

    pub fn is_empty(&self) -> bool {
        self.meta.token_count == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> i32 {
        let b = &self.bytes()[i * 4..i * 4 + 4];
        i32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    /// Copy `[start, start + len)` into `out`.
    pub fn read_into(&self, start: usize, len: usize, out: &mut Vec<i32>) {
        out.clear();
        out.extend(
            self.bytes()[start * 4..(start + len) * 4]
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
    }

    pub fn to_vec(&self) -> Vec<i32> {
        let mut out = Vec::with_capacity(self.len());
        self.read_into(0, self.len(), &mut out);
        out
    }
}

fn write_meta(path: &Path, meta: &TokenStreamMeta) -> Result<()> {
    let mpath = meta_path(path);
    let text = serde_json::to_string_pretty(meta).expect("meta serialization cannot fail");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Read a JSONL file of `{"text": ...}` objects.
pub fn read_jsonl_docs(path: impl AsRef<Path>) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Doc {
        text: String,
    }
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Doc = serde_json::from_str(&line).map_err(|e| PackError::BadDocument {
            line: i + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc.text);
    }
    Ok(docs)
}

/// Normalize, encode and append EOS to every document, writing the ids to
/// `out` in document order. Output bytes do not depend on thread count.
pub fn pack_corpus<I>(
    docs: I,
    model: &TokenizerModel,
    cfg: &NormalizationConfig,
    out: impl AsRef<Path>,
) -> Result<TokenStream>
where
    I: IntoIterator,
    I::Item: AsRef<str> + Send + Sync,
{
    let out = out.as_ref();
    let eos = model.eos_id().ok_or(PackError::NoEos)? as i32;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let mut token_count = 0usize;
    let mut doc_count = 0usize;

    let mut iter = docs.into_iter().peekable();
    let mut chunk = Vec::with_capacity(DOC_CHUNK);
    while iter.peek().is_some() {
        chunk.clear();
        chunk.extend(iter.by_ref().take(DOC_CHUNK));
        let encoded: Vec<Vec<u8>> = chunk
            .par_iter()
            .map(|doc| {
                let ids = model.encode(&normalize(doc.as_ref(), cfg));
                let mut bytes = Vec::with_capacity((ids.len() + 1) * 4);
                for id in ids {
                    bytes.extend_from_slice(&(id as i32).to_le_bytes());
                }
                bytes.extend_from_slice(&eos.to_le_bytes());
                bytes
            })
            .collect();
        for bytes in &encoded {
            w.write_all(bytes).map_err(|e| Error::io(out, e))?;
            token_count += bytes.len() / 4;
        }
        doc_count += chunk.len();
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    drop(w);

    let meta = TokenStreamMeta {
        token_count,
        eos_id: eos,
        tokenizer_fingerprint: model.fingerprint(),
        created_from: doc_count,
    };
    write_meta(out, &meta)?;
    TokenStream::open(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedWindow {
    pub start: usize,
    pub tokens: Vec<i32>,
    /// Segment boundaries: strictly increasing, first 0, last `tokens.len()`.
    pub cu_seqlens: Vec<i32>,
}

impl PackedWindow {
    /// Iterate segments as `[begin, end)` pairs.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cu_seqlens
            .windows(2)
            .map(|w| (w[0] as usize, w[1] as usize))
    }

    pub fn max_seqlen(&self) -> usize {
        self.segments().map(|(a, b)| b - a).max().unwrap_or(0)
    }
}

/// Boundaries after every EOS strictly inside the window, anchored at 0 and L.
pub fn cu_seqlens(tokens: &[i32], eos: i32) -> Vec<i32> {
    let len = tokens.len();
    let mut out = Vec::with_capacity(8);
    out.push(0);
    if len == 0 {
        return out;
    }
    for (p, &t) in tokens[..len - 1].iter().enumerate() {
        if t == eos {
            out.push(p as i32 + 1);
        }
    }
    out.push(len as i32);
    out
}

pub fn sample_window(
    stream: &TokenStream,
    seed: u64,
    rank: u64,
    step: u64,
    len: usize,
) -> Result<PackedWindow, PackError> {
    let mut tokens = Vec::with_capacity(len);
    let start = sample_into(stream, seed, rank, step, len, &mut tokens)?;
    let cu = cu_seqlens(&tokens, stream.meta.eos_id);
    Ok(PackedWindow {
        start,
        tokens,
        cu_seqlens: cu,
    })
}

fn sample_into(
    stream: &TokenStream,
    seed: u64,
    rank: u64,
    step: u64,
    len: usize,
    buf: &mut Vec<i32>,
) -> Result<usize, PackError> {
    if len == 0 {
        return Err(PackError::ZeroWindow);
    }
    if len > stream.len() {
        return Err(PackError::WindowTooLong {
            len,
            tokens: stream.len(),
        });
    }
    let start = window_start(seed, rank, step, stream.len(), len);
    stream.read_into(start, len, buf);
    Ok(start)
}

/// Global batch arithmetic for data-parallel training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub micro_batch: u64,
    pub seq_len: u64,
    pub grad_accum: u64,
    pub world_size: u64,
    pub tokens_per_step: u64,
}

impl BatchPlan {
    pub fn new(
        micro_batch: u64,
        seq_len: u64,
        grad_accum: u64,
        world_size: u64,
    ) -> Result<Self, PackError> {
        if [micro_batch, seq_len, grad_accum, world_size].contains(&0) {
            return Err(PackError::ZeroBatchField);
        }
        Ok(Self {
            micro_batch,
            seq_len,
            grad_accum,
            world_size,
            tokens_per_step: micro_batch * seq_len * grad_accum * world_size,
        })
    }

    pub fn total_tokens(&self, steps: u64) -> u64 {
        self.tokens_per_step * steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaderBench {
    pub windows: usize,
    pub window_len: usize,
    pub tokens: u64,
    pub seconds: f64,
    pub tokens_per_second: f64,
}

/// Time `n_windows` sequential window draws (copy plus boundary scan).
pub fn bench_loader(
    stream: &TokenStream,
    len: usize,
    n_windows: usize,
    seed: u64,
) -> Result<LoaderBench, PackError> {
    if n_windows == 0 {
        return Err(PackError::EmptyBenchmark);
    }
    let mut buf = Vec::with_capacity(len);
    let mut boundaries = 0usize;
    let t0 = Instant::now();
    for step in 0..n_windows as u64 {
        sample_into(stream, seed, 0, step, len, &mut buf)?;
        boundaries += cu_seqlens(&buf, stream.meta.eos_id).len();
    }
    let seconds = t0.elapsed().as_secs_f64().max(1e-9);
    std::hint::black_box(boundaries);
    let tokens = (n_windows * len) as u64;
    Ok(LoaderBench {
        windows: n_windows,
        window_len: len,
        tokens,
        seconds,
        tokens_per_second: tokens as f64 / seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::testutil::byte_model;
    use crate::tokenizer::SpecialTokens;

    #[test]
    fn splitmix_reference_vectors() {
        // Successive outputs of SplitMix64 seeded with 1234567.
        let expected = [
            6457827717110365317u64,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ];
        let mut state = 1234567u64;
        for want in expected {
            assert_eq!(splitmix64(state), want);
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        }
    }

    #[test]
    fn boundary_fixture() {
        assert_eq!(cu_seqlens(&[5, 6, 2, 7, 8, 9, 2, 4], 2), vec![0, 3, 7, 8]);
        assert_eq!(cu_seqlens(&[5, 6, 7], 2), vec![0, 3]);
        // EOS at the last position closes the final segment without adding one.
        assert_eq!(cu_seqlens(&[5, 2], 2), vec![0, 2]);
        // EOS first: a one-token segment, never an empty one.
        assert_eq!(cu_seqlens(&[2, 5, 6], 2), vec![0, 1, 3]);
        assert_eq!(cu_seqlens(&[2, 2, 2], 2), vec![0, 1, 2, 3]);
    }

    #[test]
    fn window_sampling_is_deterministic() {
        let ids: Vec<i32> = (0..1000)
            .map(|i| if i % 17 == 0 { 2 } else { 10 + i })
            .collect();
        let s = TokenStream::from_ids(&ids, 2);
        let a = sample_window(&s, 42, 3, 99, 64).unwrap();
        let b = sample_window(&s, 42, 3, 99, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens, ids[a.start..a.start + 64]);
        assert_ne!(a.start, sample_window(&s, 42, 4, 99, 64).unwrap().start);
    }

    #[test]
    fn window_errors() {
        let s = TokenStream::from_ids(&[1, 2, 3], 2);
        assert!(matches!(
            sample_window(&s, 0, 0, 0, 4),
            Err(PackError::WindowTooLong { .. })
        ));
        assert!(matches!(
            sample_window(&s, 0, 0, 0, 0),
            Err(PackError::ZeroWindow)
        ));
        let full = sample_window(&s, 0, 0, 0, 3).unwrap();
        assert_eq!(full.start, 0);
    }

    #[test]
    fn batch_arithmetic() {
        let plan = BatchPlan::new(16, 4096, 8, 8).unwrap();
        assert_eq!(plan.tokens_per_step, 4_194_304);
        assert_eq!(plan.total_tokens(2_500), 10_485_760_000);
        assert_eq!(BatchPlan::new(1, 1, 1, 1).unwrap().tokens_per_step, 1);
        assert!(BatchPlan::new(0, 1, 1, 1).is_err());
    }

    fn eos_model() -> TokenizerModel {
        byte_model(
            &[("a", "b")],
            &["<eos>"],
            SpecialTokens {
                eos: Some("<eos>".into()),
                unk: None,
            },
        )
    }

    #[test]
    fn pack_layout_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let m = eos_model();
        let eos = m.eos_id().unwrap() as i32;
        let path = dir.path().join("corpus.bin");
        let s = pack_corpus(["ab", "c", ""], &m, &NormalizationConfig::default(), &path).unwrap();
        let ab = m.piece_id("ab").unwrap() as i32;
        assert_eq!(s.to_vec(), vec![ab, eos, b'c' as i32, eos, eos]);
        assert_eq!(s.meta.token_count, 5);
        assert_eq!(s.meta.created_from, 3);
        assert_eq!(s.meta.tokenizer_fingerprint, m.fingerprint());
        assert!(meta_path(&path).ends_with("corpus.meta.json"));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 20);
    }

    #[test]
    fn empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let s = pack_corpus(
            Vec::<String>::new(),
            &eos_model(),
            &NormalizationConfig::default(),
            &path,
        )
        .unwrap();
        assert_eq!(s.meta.token_count, 0);
        assert!(s.is_empty());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
    }

    #[test]
    fn repacking_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let docs: Vec<String> = (0..600)
            .map(|i| format!("doc {i} أَحمد ـ abab {}", "x".repeat(i % 13)))
            .collect();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        pack_corpus(&docs, &eos_model(), &NormalizationConfig::default(), &p1).unwrap();
        pack_corpus(
            docs.iter().map(String::as_str),
            &eos_model(),
            &NormalizationConfig::default(),
            &p2,
        )
        .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn needs_eos() {
        let dir = tempfile::tempdir().unwrap();
        let m = byte_model(&[], &[], SpecialTokens::default());
        let err = pack_corpus(
            ["a"],
            &m,
            &NormalizationConfig::default(),
            dir.path().join("x.bin"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Pack(PackError::NoEos)));
    }

    #[test]
    fn bench_requires_windows() {
        let s = TokenStream::from_ids(&[1; 64], 2);
        assert!(matches!(
            bench_loader(&s, 8, 0, 0),
            Err(PackError::EmptyBenchmark)
        ));
        assert!(bench_loader(&s, 8, 10, 0).unwrap().tokens_per_second > 0.0);
    }

    #[test]
    fn jsonl_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        std::fs::write(&path, "{\"text\": \"a\"}\n\n{\"text\": \"b\", \"id\": 3}\n").unwrap();
        assert_eq!(read_jsonl_docs(&path).unwrap(), vec!["a", "b"]);
        std::fs::write(&path, "{\"body\": 1}\n").unwrap();
        assert!(read_jsonl_docs(&path).is_err());
    }
}
