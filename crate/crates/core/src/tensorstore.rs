//! Single-file tensor container (the `.safetensors` layout).
//!
//! ```text
//! [u64 LE header length N][N bytes of JSON header][tensor bytes...]
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, data_offsets}` with
//! offsets relative to the end of the header, plus an optional
//! `__metadata__` string map. Data regions must tile the data section
//! exactly. Writes are deterministic: metadata first, then tensors in
//! insertion order, and the header is space-padded to an 8-byte boundary.

use std::fmt;
use std::path::Path;

use half::{bf16, f16};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

const METADATA_KEY: &str = "__metadata__";
// Headers beyond this are rejected before allocation.
const MAX_HEADER: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dtype {
    F32,
    F16,
    BF16,
    I64,
    I32,
    I8,
    U8,
    BOOL,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::I64 => 8,
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::I8 | Dtype::U8 | Dtype::BOOL => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F16 | Dtype::BF16)
    }

    pub fn parse(s: &str) -> Result<Self, TensorError> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| TensorError::UnknownDtype(s.to_owned()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::I64 => "I64",
            Dtype::I32 => "I32",
            Dtype::I8 => "I8",
            Dtype::U8 => "U8",
            Dtype::BOOL => "BOOL",
        }
    }

    /// Exact conversion of one stored float element to `f32`.
    ///
    /// Panics on non-float dtypes or a short slice.
    #[inline]
    pub fn widen(self, bytes: &[u8]) -> f32 {
        match self {
            Dtype::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
            Dtype::F16 => f16::from_bits(u16::from_le_bytes([bytes[0], bytes[1]])).to_f32(),
            Dtype::BF16 => bf16::from_bits(u16::from_le_bytes([bytes[0], bytes[1]])).to_f32(),
            other => panic!("widen on non-float dtype {other}"),
        }
    }

    /// Round-to-nearest-even conversion of `value` into this dtype's bytes.
    #[inline]
    pub fn narrow(self, value: f32, out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => out.extend_from_slice(&value.to_le_bytes()),
            Dtype::F16 => out.extend_from_slice(&f16::from_f32(value).to_bits().to_le_bytes()),
            Dtype::BF16 => out.extend_from_slice(&bf16::from_f32(value).to_bits().to_le_bytes()),
            other => panic!("narrow on non-float dtype {other}"),
        }
    }

    /// Like [`narrow`](Self::narrow) but rounds once from `f64`.
    #[inline]
    pub fn narrow_f64(self, value: f64, out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => out.extend_from_slice(&(value as f32).to_le_bytes()),
            Dtype::F16 => out.extend_from_slice(&f16::from_f64(value).to_bits().to_le_bytes()),
            Dtype::BF16 => out.extend_from_slice(&bf16::from_f64(value).to_bits().to_le_bytes()),
            other => panic!("narrow on non-float dtype {other}"),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn new(
        name: &str,
        dtype: Dtype,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::BadShape(name.to_owned()));
        }
        let expected = shape.iter().product::<usize>() * dtype.width();
        if data.len() != expected {
            return Err(TensorError::SizeMismatch {
                name: name.to_owned(),
                len: data.len(),
                shape,
                dtype: dtype.to_string(),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    /// Narrow `values` into a new float tensor.
    pub fn from_f32(
        name: &str,
        dtype: Dtype,
        shape: Vec<usize>,
        values: &[f32],
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(values.len() * dtype.width());
        for &v in values {
            dtype.narrow(v, &mut data);
        }
        Self::new(name, dtype, shape, data)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    /// Widen every element to `f32`. `None` for non-float tensors.
    pub fn to_f32(&self) -> Option<Vec<f32>> {
        if !self.dtype.is_float() {
            return None;
        }
        Some(
            self.data
                .chunks_exact(self.dtype.width())
                .map(|c| self.dtype.widen(c))
                .collect(),
        )
    }

    /// Element `i` widened to `f32`.
    pub fn get_f32(&self, i: usize) -> f32 {
        let w = self.dtype.width();
        self.dtype.widen(&self.data[i * w..(i + 1) * w])
    }
}

/// Placement of one tensor inside the data section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpan {
    pub name: String,
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub tensors: IndexMap<String, TensorRecord>,
    pub metadata: IndexMap<String, String>,
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Serialize)]
struct HeaderEntryOut<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord, TensorError> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::Missing(name.to_owned()))
    }

    /// Append a tensor; names must be unique.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        record: TensorRecord,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.tensors.insert(name, record);
        Ok(())
    }

    /// Replace an existing tensor in place, keeping its position.
    pub fn replace(&mut self, name: &str, record: TensorRecord) -> Result<(), TensorError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::Missing(name.to_owned()))?;
        *slot = record;
        Ok(())
    }

    /// Data offsets the writer assigns, in write order.
    pub fn spans(&self) -> Vec<TensorSpan> {
        let mut at = 0;
        self.tensors
            .iter()
            .map(|(name, rec)| {
                let span = TensorSpan {
                    name: name.clone(),
                    begin: at,
                    end: at + rec.byte_len(),
                };
                at = span.end;
                span
            })
            .collect()
    }

    pub fn data_len(&self) -> usize {
        self.tensors.values().map(TensorRecord::byte_len).sum()
    }

    fn header_json(&self) -> String {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.into(),
                serde_json::to_value(&self.metadata).expect("string map"),
            );
        }
        for (span, rec) in self.spans().iter().zip(self.tensors.values()) {
            let entry = HeaderEntryOut {
                dtype: rec.dtype.name(),
                shape: &rec.shape,
                data_offsets: [span.begin, span.end],
            };
            header.insert(
                span.name.clone(),
                serde_json::to_value(entry).expect("plain struct"),
            );
        }
        // serde_json is built with preserve_order, so keys keep insertion order.
        let mut text = serde_json::to_string(&header).expect("header serialization cannot fail");
        while !text.len().is_multiple_of(8) {
            text.push(' ');
        }
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_json();
        let mut out = Vec::with_capacity(8 + header.len() + self.data_len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for rec in self.tensors.values() {
            out.extend_from_slice(&rec.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 8 {
            return Err(TensorError::Truncated(format!(
                "{} bytes, need at least 8",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if n > available || n > MAX_HEADER {
            return Err(TensorError::HeaderTooLarge {
                header: n,
                file: bytes.len() as u64,
            });
        }
        let header_end = 8 + n as usize;
        let raw: IndexMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..header_end])
                .map_err(|e| TensorError::InvalidHeader(e.to_string()))?;
        let data = &bytes[header_end..];

        let mut metadata = IndexMap::new();
        let mut entries = Vec::with_capacity(raw.len());
        for (name, value) in raw {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| TensorError::InvalidHeader(format!("{METADATA_KEY}: {e}")))?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| TensorError::InvalidHeader(format!("{name}: {e}")))?;
            let dtype = Dtype::parse(&entry.dtype)?;
            entries.push((name, dtype, entry.shape, entry.data_offsets));
        }

        entries.sort_by_key(|e| (e.3[0], e.3[1]));
        let mut store = TensorStore {
            tensors: IndexMap::with_capacity(entries.len()),
            metadata,
        };
        let mut cursor = 0usize;
        for (name, dtype, shape, [begin, end]) in entries {
            if end < begin {
                return Err(TensorError::InvalidHeader(format!(
                    "{name}: data_offsets end before begin"
                )));
            }
            if begin < cursor {
                return Err(TensorError::Overlap { name, begin, end });
            }
            if begin > cursor {
                return Err(TensorError::Gap { name, at: cursor });
            }
            if end > data.len() {
                return Err(TensorError::Truncated(format!(
                    "{name} ends at {end}, data section has {}",
                    data.len()
                )));
            }
            let record = TensorRecord::new(&name, dtype, shape, data[begin..end].to_vec())?;
            store.insert(name, record)?;
            cursor = end;
        }
        if cursor != data.len() {
            return Err(TensorError::InvalidHeader(format!(
                "{} trailing bytes after the last tensor",
                data.len() - cursor
            )));
        }
        Ok(store)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> TensorStore {
        let mut s = TensorStore::new();
        s.metadata.insert("format".into(), "pt".into());
        s.insert(
            "embed",
            TensorRecord::from_f32("embed", Dtype::F32, vec![2, 3], &[1., 2., 3., 4., 5., 6.])
                .unwrap(),
        )
        .unwrap();
        s.insert(
            "norm",
            TensorRecord::from_f32("norm", Dtype::BF16, vec![3], &[1.0, -0.5, 0.25]).unwrap(),
        )
        .unwrap();
        s.insert(
            "steps",
            TensorRecord::new("steps", Dtype::I64, vec![1], 7i64.to_le_bytes().to_vec()).unwrap(),
        )
        .unwrap();
        s
    }

    /// Assemble a raw file from a header string and data bytes.
    fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn known_encodings() {
        assert_eq!(Dtype::BF16.widen(&0x3F80u16.to_le_bytes()), 1.0);
        assert_eq!(Dtype::F16.widen(&0x3C00u16.to_le_bytes()), 1.0);
        let mut out = Vec::new();
        Dtype::BF16.narrow(1.0, &mut out);
        assert_eq!(out, 0x3F80u16.to_le_bytes());
    }

    #[test]
    fn bf16_narrow_rounds_to_nearest_even() {
        // 1 + 2^-8 sits halfway between bf16 1.0 and 1 + 2^-7; ties go to even (1.0).
        let mut out = Vec::new();
        Dtype::BF16.narrow(1.0 + 2f32.powi(-8), &mut out);
        assert_eq!(u16::from_le_bytes([out[0], out[1]]), 0x3F80);
        out.clear();
        // 1 + 3*2^-8 is halfway between 1+2^-7 (odd) and 1+2^-6 (even).
        Dtype::BF16.narrow(1.0 + 3.0 * 2f32.powi(-8), &mut out);
        assert_eq!(u16::from_le_bytes([out[0], out[1]]), 0x3F82);
    }

    #[test]
    fn narrow_widen_identity_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dtype in [Dtype::F32, Dtype::F16, Dtype::BF16] {
            let mut checked = 0;
            while checked < 10_000 {
                let bytes: Vec<u8> = (0..dtype.width()).map(|_| rng.random()).collect();
                let v = dtype.widen(&bytes);
                if v.is_nan() {
                    continue;
                }
                let mut out = Vec::new();
                dtype.narrow(v, &mut out);
                assert_eq!(out, bytes, "{dtype} {v}");
                checked += 1;
            }
        }
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let s = sample_store();
        let bytes = s.to_bytes();
        let back = TensorStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!((bytes.len() - 8 - s.data_len()) % 8, 0);
    }

    #[test]
    fn empty_store_roundtrips() {
        let s = TensorStore::new();
        assert_eq!(TensorStore::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn header_is_integer_only() {
        let bytes = sample_store().to_bytes();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        assert!(header.starts_with(r#"{"__metadata__":{"format":"pt"},"embed":{"dtype":"F32","shape":[2,3],"data_offsets":[0,24]}"#), "{header}");
        assert!(!header.contains('.'));
    }

    #[test]
    fn file_order_not_header_order() {
        let header = r#"{"b":{"dtype":"U8","shape":[2],"data_offsets":[2,4]},"a":{"dtype":"U8","shape":[2],"data_offsets":[0,2]}}"#;
        let s = TensorStore::from_bytes(&raw_file(header, &[1, 2, 3, 4])).unwrap();
        assert_eq!(s.tensors.keys().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.get("b").unwrap().data, vec![3, 4]);
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let header = r#"{"a":{"dtype":"U8","shape":[3],"data_offsets":[0,3]},"b":{"dtype":"U8","shape":[2],"data_offsets":[2,4]}}"#;
        let err = TensorStore::from_bytes(&raw_file(header, &[0; 4])).unwrap_err();
        assert!(matches!(err, TensorError::Overlap { .. }), "{err}");
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            TensorStore::from_bytes(&[1, 2, 3]),
            Err(TensorError::Truncated(_))
        ));
        let mut bytes = (1000u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(
            TensorStore::from_bytes(&bytes),
            Err(TensorError::HeaderTooLarge { .. })
        ));
        let header = r#"{"a":{"dtype":"Q4","shape":[1],"data_offsets":[0,1]}}"#;
        assert!(matches!(
            TensorStore::from_bytes(&raw_file(header, &[0])),
            Err(TensorError::UnknownDtype(_))
        ));
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        assert!(matches!(
            TensorStore::from_bytes(&raw_file(header, &[0; 4])),
            Err(TensorError::Truncated(_))
        ));
        let header = r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        assert!(matches!(
            TensorStore::from_bytes(&raw_file(header, &[0; 8])),
            Err(TensorError::SizeMismatch { .. })
        ));
        let header = r#"{"a":{"dtype":"U8","shape":[1],"data_offsets":[1,2]}}"#;
        assert!(matches!(
            TensorStore::from_bytes(&raw_file(header, &[0; 2])),
            Err(TensorError::Gap { .. })
        ));
        let header = r#"{"a":{"dtype":"U8","shape":[],"data_offsets":[0,1]}}"#;
        assert!(matches!(
            TensorStore::from_bytes(&raw_file(header, &[0])),
            Err(TensorError::BadShape(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let s = sample_store();
        s.write(&path).unwrap();
        assert_eq!(TensorStore::read(&path).unwrap(), s);
        assert!(TensorStore::read(dir.path().join("missing"))
            .unwrap_err()
            .is_io());
    }

    fn arb_store() -> impl Strategy<Value = TensorStore> {
        let dtype = prop_oneof![
            Just(Dtype::F32),
            Just(Dtype::F16),
            Just(Dtype::BF16),
            Just(Dtype::I32),
            Just(Dtype::U8)
        ];
        let tensor =
            (dtype, proptest::collection::vec(1usize..4, 1..4)).prop_flat_map(|(dtype, shape)| {
                let n = shape.iter().product::<usize>() * dtype.width();
                proptest::collection::vec(any::<u8>(), n)
                    .prop_map(move |data| (dtype, shape.clone(), data))
            });
        proptest::collection::vec(tensor, 0..5).prop_map(|ts| {
            let mut s = TensorStore::new();
            for (i, (dtype, shape, data)) in ts.into_iter().enumerate() {
                let name = format!("layer.{i}.weight");
                s.insert(
                    name.clone(),
                    TensorRecord::new(&name, dtype, shape, data).unwrap(),
                )
                .unwrap();
            }
            s
        })
    }

    proptest! {
        #[test]
        fn read_write_read_identity(s in arb_store()) {
            let bytes = s.to_bytes();
            let back = TensorStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
