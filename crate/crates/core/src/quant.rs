//! Effective bits-per-weight for a block-quantization plan.
//!
//! Block formats need the quantized dimension to be a multiple of their block
//! size; tensors that are not, or whose names match an exempt pattern, are
//! stored at the scheme's wider fallback width. Bit counts are kept as exact
//! rationals so reports over manifest halves add up to the whole.

use std::fmt;
use std::path::Path;

use num_rational::{BigRational, Ratio};
use rayon::prelude::*;
use regex::RegexSet;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::tensorstore::TensorStore;
use crate::Error;

type Rational = Ratio<i128>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<u64>,
}

impl ManifestEntry {
    pub fn new(name: impl Into<String>, shape: &[u64]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }
}

/// `(name, shape)` of every tensor in a store, in file order.
pub fn manifest_of(store: &TensorStore) -> Vec<ManifestEntry> {
    store
        .tensors
        .iter()
        .map(|(name, rec)| ManifestEntry {
            name: name.clone(),
            shape: rec.shape.iter().map(|&d| d as u64).collect(),
        })
        .collect()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizedDim {
    #[default]
    Last,
    First,
}

/// Published figures a scheme can be compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub fallback_tensor_count: usize,
    pub effective_bpw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub name: String,
    pub nominal_bpw: f64,
    pub block_size: u64,
    pub fallback_bpw: f64,
    /// Regexes; a tensor whose name matches any of them uses the fallback.
    #[serde(default)]
    pub exempt_names: Vec<String>,
    #[serde(default)]
    pub quantized_dim: QuantizedDim,
    #[serde(default)]
    pub per_tensor_overhead_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

impl QuantScheme {
    /// 4-bit k-quant mix: 4.5 bpw super-blocks of 256, falling back to a
    /// 5.5 bpw 32-element format.
    pub fn q4_k_m() -> Self {
        Self {
            name: "q4_k_m".into(),
            nominal_bpw: 4.5,
            block_size: 256,
            fallback_bpw: 5.5,
            exempt_names: vec![r"norm\.weight$".into(), r"\.bias$".into()],
            quantized_dim: QuantizedDim::Last,
            per_tensor_overhead_bytes: 0,
            reference: Some(Reference {
                fallback_tensor_count: 144,
                effective_bpw: 6.45,
            }),
        }
    }

    /// 5-bit k-quant mix: 5.5 bpw super-blocks of 256, falling back to a
    /// 6 bpw 32-element format.
    pub fn q5_k_m() -> Self {
        Self {
            name: "q5_k_m".into(),
            nominal_bpw: 5.5,
            block_size: 256,
            fallback_bpw: 6.0,
            reference: Some(Reference {
                fallback_tensor_count: 144,
                effective_bpw: 6.79,
            }),
            ..Self::q4_k_m()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "q4_k_m" => Some(Self::q4_k_m()),
            "q5_k_m" => Some(Self::q5_k_m()),
            _ => None,
        }
    }

    /// A preset name or a path to a scheme JSON file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(s) = Self::preset(spec) {
            return Ok(s);
        }
        let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(spec.to_owned(), e))
    }

    fn compiled(&self) -> Result<Compiled, QuantError> {
        if self.block_size == 0 {
            return Err(QuantError::BadScheme(
                "block_size must be at least 1".into(),
            ));
        }
        if !(self.nominal_bpw > 0.0
            && self.nominal_bpw <= self.fallback_bpw
            && self.fallback_bpw.is_finite())
        {
            return Err(QuantError::BadScheme(format!(
                "need 0 < nominal_bpw <= fallback_bpw (got {} and {})",
                self.nominal_bpw, self.fallback_bpw
            )));
        }
        let exempt =
            RegexSet::new(&self.exempt_names).map_err(|e| QuantError::BadScheme(e.to_string()))?;
        Ok(Compiled {
            nominal: to_rational(self.nominal_bpw)?,
            fallback: to_rational(self.fallback_bpw)?,
            exempt,
        })
    }
}

struct Compiled {
    nominal: Rational,
    fallback: Rational,
    exempt: RegexSet,
}

/// The exact value of `x` (every finite double is a dyadic rational).
fn to_rational(x: f64) -> Result<Rational, QuantError> {
    let bad = || QuantError::BadScheme(format!("bpw {x} is not representable"));
    let r = BigRational::from_float(x).ok_or_else(bad)?;
    let numer = i128::try_from(r.numer()).map_err(|_| bad())?;
    let denom = i128::try_from(r.denom()).map_err(|_| bad())?;
    Ok(Ratio::new(numer, denom))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reason {
    Nominal,
    Misaligned,
    Exempt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFootprint {
    pub name: String,
    pub params: u64,
    pub assigned_bpw: f64,
    pub reason: Reason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub scheme: String,
    pub tensors: Vec<TensorFootprint>,
    pub total_params: u64,
    /// Exact total as `numerator/denominator`.
    pub total_bits_exact: String,
    pub total_bits: f64,
    pub total_bytes: f64,
    pub effective_bpw: f64,
    pub fallback_tensor_count: usize,
    #[serde(skip)]
    bits: Rational,
    #[serde(skip)]
    overhead_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceDelta>,
}

/// Measured minus published.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDelta {
    pub reference: Reference,
    pub fallback_tensor_delta: i64,
    pub effective_bpw_delta: f64,
}

impl FootprintReport {
    fn from_parts(
        scheme: &QuantScheme,
        tensors: Vec<TensorFootprint>,
        bits: Rational,
        overhead_bytes: u64,
    ) -> Self {
        let total_params: u64 = tensors.iter().map(|t| t.params).sum();
        let fallback_tensor_count = tensors
            .iter()
            .filter(|t| t.reason != Reason::Nominal)
            .count();
        let total_bits = ratio_f64(bits);
        let effective_bpw = ratio_f64(bits / Rational::from_integer(total_params as i128));
        let reference = scheme.reference.map(|r| ReferenceDelta {
            reference: r,
            fallback_tensor_delta: fallback_tensor_count as i64 - r.fallback_tensor_count as i64,
            effective_bpw_delta: effective_bpw - r.effective_bpw,
        });
        Self {
            scheme: scheme.name.clone(),
            tensors,
            total_params,
            total_bits_exact: format!("{}/{}", bits.numer(), bits.denom()),
            total_bits,
            total_bytes: total_bits / 8.0 + overhead_bytes as f64,
            effective_bpw,
            fallback_tensor_count,
            bits,
            overhead_bytes,
            reference,
        }
    }

    /// Exact total bit count.
    pub fn bits(&self) -> Rational {
        self.bits
    }

    /// Report for the concatenation of two manifests estimated under `scheme`.
    pub fn combine(&self, other: &Self, scheme: &QuantScheme) -> Self {
        let tensors = self.tensors.iter().chain(&other.tensors).cloned().collect();
        Self::from_parts(
            scheme,
            tensors,
            self.bits + other.bits,
            self.overhead_bytes + other.overhead_bytes,
        )
    }
}

fn ratio_f64(r: Rational) -> f64 {
    // Integer part first so large totals keep full precision.
    let whole = r.trunc();
    *whole.numer() as f64 + (*r.fract().numer() as f64 / *r.denom() as f64)
}

impl fmt::Display for FootprintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scheme: {}", self.scheme)?;
        writeln!(
            f,
            "tensors: {} ({} at fallback)",
            self.tensors.len(),
            self.fallback_tensor_count
        )?;
        writeln!(f, "params: {}", self.total_params)?;
        writeln!(f, "bytes: {:.0}", self.total_bytes)?;
        write!(f, "effective_bpw: {:.2}", self.effective_bpw)?;
        if let Some(r) = &self.reference {
            write!(
                f,
                "\nreference: fallback {} (delta {:+}), effective_bpw {:.2} (delta {:+.2})",
                r.reference.fallback_tensor_count,
                r.fallback_tensor_delta,
                r.reference.effective_bpw,
                r.effective_bpw_delta
            )?;
        }
        Ok(())
    }
}

pub fn estimate(
    manifest: &[ManifestEntry],
    scheme: &QuantScheme,
) -> Result<FootprintReport, QuantError> {
    if manifest.is_empty() {
        return Err(QuantError::EmptyManifest);
    }
    if let Some(e) = manifest
        .iter()
        .find(|e| e.shape.is_empty() || e.shape.contains(&0))
    {
        return Err(QuantError::EmptyShape(e.name.clone()));
    }
    let c = scheme.compiled()?;
    let rows: Vec<(TensorFootprint, Rational)> = manifest
        .par_iter()
        .map(|e| {
            let params: u64 = e.shape.iter().product();
            let extent = match scheme.quantized_dim {
                QuantizedDim::Last => *e.shape.last().expect("non-empty"),
                QuantizedDim::First => e.shape[0],
            };
            let reason = if c.exempt.is_match(&e.name) {
                Reason::Exempt
            } else if extent % scheme.block_size != 0 {
                Reason::Misaligned
            } else {
                Reason::Nominal
            };
            let (bpw, bpw_f) = match reason {
                Reason::Nominal => (c.nominal, scheme.nominal_bpw),
                _ => (c.fallback, scheme.fallback_bpw),
            };
            let bits = bpw * Rational::from_integer(params as i128);
            (
                TensorFootprint {
                    name: e.name.clone(),
                    params,
                    assigned_bpw: bpw_f,
                    reason,
                },
                bits,
            )
        })
        .collect();
    let bits = rows
        .iter()
        .fold(Rational::from_integer(0), |acc, (_, b)| acc + b);
    let tensors = rows.into_iter().map(|(t, _)| t).collect();
    let overhead = scheme.per_tensor_overhead_bytes * manifest.len() as u64;
    Ok(FootprintReport::from_parts(scheme, tensors, bits, overhead))
}

/// Tensor manifest of a 24-layer, 896-wide decoder with grouped-query
/// attention (128-wide k/v), a 4864-wide MLP and a tied embedding over
/// `vocab` rows: 290 tensors in total.
pub fn qwen2_05b_manifest(vocab: u64) -> Vec<ManifestEntry> {
    let (h, kv, mlp) = (896u64, 128u64, 4864u64);
    let mut m = vec![ManifestEntry::new("model.embed_tokens.weight", &[vocab, h])];
    for l in 0..24 {
        let p = format!("model.layers.{l}");
        m.extend([
            ManifestEntry::new(format!("{p}.input_layernorm.weight"), &[h]),
            ManifestEntry::new(format!("{p}.self_attn.q_proj.weight"), &[h, h]),
            ManifestEntry::new(format!("{p}.self_attn.q_proj.bias"), &[h]),
            ManifestEntry::new(format!("{p}.self_attn.k_proj.weight"), &[kv, h]),
            ManifestEntry::new(format!("{p}.self_attn.k_proj.bias"), &[kv]),
            ManifestEntry::new(format!("{p}.self_attn.v_proj.weight"), &[kv, h]),
            ManifestEntry::new(format!("{p}.self_attn.v_proj.bias"), &[kv]),
            ManifestEntry::new(format!("{p}.self_attn.o_proj.weight"), &[h, h]),
            ManifestEntry::new(format!("{p}.post_attention_layernorm.weight"), &[h]),
            ManifestEntry::new(format!("{p}.mlp.gate_proj.weight"), &[mlp, h]),
            ManifestEntry::new(format!("{p}.mlp.up_proj.weight"), &[mlp, h]),
            ManifestEntry::new(format!("{p}.mlp.down_proj.weight"), &[h, mlp]),
        ]);
    }
    m.push(ManifestEntry::new("model.norm.weight", &[h]));
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme(nominal: f64, block: u64, fallback: f64) -> QuantScheme {
        QuantScheme {
            name: "toy".into(),
            nominal_bpw: nominal,
            block_size: block,
            fallback_bpw: fallback,
            exempt_names: vec![],
            quantized_dim: QuantizedDim::Last,
            per_tensor_overhead_bytes: 0,
            reference: None,
        }
    }

    #[test]
    fn two_tensor_case() {
        let m = [
            ManifestEntry::new("a", &[256]),
            ManifestEntry::new("b", &[100]),
        ];
        let r = estimate(&m, &scheme(4.5, 256, 8.5)).unwrap();
        let want = (256.0 * 4.5 + 100.0 * 8.5) / 356.0;
        assert!((r.effective_bpw - want).abs() < 1e-12);
        assert_eq!(r.bits(), Rational::new(256 * 9 + 100 * 17, 2));
        assert_eq!(r.fallback_tensor_count, 1);
        assert_eq!(r.tensors[1].reason, Reason::Misaligned);
    }

    #[test]
    fn aligned_is_nominal() {
        let m = [
            ManifestEntry::new("a", &[3, 512]),
            ManifestEntry::new("b", &[256]),
        ];
        assert_eq!(
            estimate(&m, &scheme(4.5, 256, 8.5)).unwrap().effective_bpw,
            4.5
        );
    }

    #[test]
    fn exempt_and_first_dim() {
        let mut s = scheme(4.0, 4, 8.0);
        s.exempt_names = vec!["norm".into()];
        let m = [
            ManifestEntry::new("final_norm", &[8]),
            ManifestEntry::new("w", &[6, 8]),
        ];
        let r = estimate(&m, &s).unwrap();
        assert_eq!(r.tensors[0].reason, Reason::Exempt);
        assert_eq!(r.tensors[1].reason, Reason::Nominal);
        s.quantized_dim = QuantizedDim::First;
        assert_eq!(
            estimate(&m, &s).unwrap().tensors[1].reason,
            Reason::Misaligned
        );
    }

    #[test]
    fn errors() {
        let s = scheme(4.0, 4, 8.0);
        assert!(matches!(estimate(&[], &s), Err(QuantError::EmptyManifest)));
        assert!(matches!(
            estimate(&[ManifestEntry::new("x", &[])], &s),
            Err(QuantError::EmptyShape(_))
        ));
        let m = [ManifestEntry::new("x", &[4])];
        assert!(estimate(&m, &scheme(4.0, 0, 8.0)).is_err());
        assert!(estimate(&m, &scheme(9.0, 4, 8.0)).is_err());
        let mut bad = s.clone();
        bad.exempt_names = vec!["(".into()];
        assert!(estimate(&m, &bad).is_err());
    }

    #[test]
    fn overhead_bytes() {
        let mut s = scheme(4.0, 4, 8.0);
        s.per_tensor_overhead_bytes = 10;
        let r = estimate(
            &[ManifestEntry::new("x", &[4]), ManifestEntry::new("y", &[4])],
            &s,
        )
        .unwrap();
        assert_eq!(r.total_bytes, 4.0 + 20.0);
    }

    #[test]
    fn qwen_shaped_manifest() {
        let m = qwen2_05b_manifest(151_665 + 27_032);
        assert_eq!(m.len(), 290);
        assert_eq!(m[0].shape, vec![178_697, 896]);
        // Weight matrices whose input width (896) is not a multiple of 256.
        let misaligned_weights = m
            .iter()
            .filter(|e| {
                e.shape.len() == 2 && e.name.starts_with("model.layers") && e.shape[1] % 256 != 0
            })
            .count();
        assert_eq!(misaligned_weights, 144);
        for s in [QuantScheme::q4_k_m(), QuantScheme::q5_k_m()] {
            let r = estimate(&m, &s).unwrap();
            let d = r.reference.expect("presets carry a reference");
            assert!(r.effective_bpw >= s.nominal_bpw && r.effective_bpw <= s.fallback_bpw);
            assert_eq!(
                d.fallback_tensor_delta,
                r.fallback_tensor_count as i64 - 144
            );
        }
    }

    #[test]
    fn scheme_json() {
        let text = r#"{"name": "x", "nominal_bpw": 4.5, "block_size": 256, "fallback_bpw": 5.5, "quantized_dim": "first"}"#;
        let s: QuantScheme = serde_json::from_str(text).unwrap();
        assert_eq!(s.quantized_dim, QuantizedDim::First);
        assert!(s.exempt_names.is_empty());
    }

    fn arb_manifest() -> impl Strategy<Value = Vec<ManifestEntry>> {
        proptest::collection::vec(proptest::collection::vec(1u64..600, 1..3), 1..30).prop_map(
            |shapes| {
                shapes
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| ManifestEntry::new(format!("t{i}"), &s))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn bounds_monotonicity_additivity(
            m in arb_manifest(),
            nominal in 1.0f64..8.0,
            bump in 0.0f64..2.0,
            extra in 0.0f64..8.0,
            block in 1u64..300,
            cut in 0usize..30,
        ) {
            let s = scheme(nominal, block, nominal + bump + extra);
            let r = estimate(&m, &s).unwrap();
            prop_assert!(r.effective_bpw >= s.nominal_bpw - 1e-12 && r.effective_bpw <= s.fallback_bpw + 1e-12);

            let higher = scheme(nominal + bump, block, nominal + bump + extra);
            prop_assert!(estimate(&m, &higher).unwrap().bits() >= r.bits());

            let cut = cut.min(m.len() - 1).max(1);
            if m.len() >= 2 {
                let (a, b) = m.split_at(cut);
                let joined = estimate(a, &s).unwrap().combine(&estimate(b, &s).unwrap(), &s);
                prop_assert_eq!(joined.bits(), r.bits());
                prop_assert_eq!(joined.total_params, r.total_params);
                prop_assert_eq!(joined.fallback_tensor_count, r.fallback_tensor_count);
            }
        }
    }
}
