//! Weight-space merging of structurally identical checkpoints.
//!
//! Every float element is widened, combined in `f64` and narrowed once, so
//! half-precision checkpoints are rounded a single time per output element.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};
use crate::tensorstore::{TensorRecord, TensorStore};
use crate::Error;

/// Below this value of sin Ω slerp falls back to lerp.
pub const SLERP_EPSILON: f64 = 1e-6;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Lerp,
    Slerp,
    Soup,
}

impl MergeMethod {
    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Lerp => "lerp",
            MergeMethod::Slerp => "slerp",
            MergeMethod::Soup => "soup",
        }
    }
}

/// A merged store plus any per-tensor warnings raised on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub store: TensorStore,
    pub warnings: Vec<String>,
}

fn check_factor(t: f64) -> Result<(), MergeError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MergeError::BadFactor(t));
    }
    Ok(())
}

fn check_weights(weights: &[f64], operands: usize) -> Result<(), MergeError> {
    if operands < 2 {
        return Err(MergeError::OperandCount {
            method: "soup",
            expected: "at least 2",
            got: operands,
        });
    }
    if weights.len() != operands {
        return Err(MergeError::WeightCount {
            weights: weights.len(),
            operands,
        });
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(MergeError::NegativeWeight);
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(MergeError::WeightSum(sum));
    }
    Ok(())
}

fn check_structure(stores: &[&TensorStore]) -> Result<(), MergeError> {
    let first = stores[0];
    for (k, other) in stores.iter().enumerate().skip(1) {
        if other.len() != first.len() {
            return Err(MergeError::StructureMismatch(format!(
                "operand {k} has {} tensors, operand 0 has {}",
                other.len(),
                first.len()
            )));
        }
        for (name, rec) in &first.tensors {
            let Some(o) = other.get(name) else {
                return Err(MergeError::StructureMismatch(format!(
                    "tensor {name:?} missing from operand {k}"
                )));
            };
            if o.dtype != rec.dtype || o.shape != rec.shape {
                return Err(MergeError::StructureMismatch(format!(
                    "tensor {name:?}: {} {:?} vs {} {:?} in operand {k}",
                    rec.dtype, rec.shape, o.dtype, o.shape
                )));
            }
        }
    }
    Ok(())
}

/// `Σ w_k · x_k` elementwise, rounded once into the operands' dtype.
fn weighted_sum(name: &str, recs: &[&TensorRecord], weights: &[f64]) -> TensorRecord {
    if let Some(k) = weights.iter().position(|&w| w == 1.0) {
        return recs[k].clone();
    }
    let dtype = recs[0].dtype;
    let width = dtype.width();
    let n = recs[0].numel();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        let at = i * width..(i + 1) * width;
        let acc: f64 = recs
            .iter()
            .zip(weights)
            .map(|(r, &w)| w * dtype.widen(&r.data[at.clone()]) as f64)
            .sum();
        dtype.narrow_f64(acc, &mut data);
    }
    TensorRecord::new(name, dtype, recs[0].shape.clone(), data)
        .expect("shape and size carried over")
}

fn slerp_tensor(
    name: &str,
    a: &TensorRecord,
    b: &TensorRecord,
    t: f64,
) -> (TensorRecord, Option<String>) {
    if t == 0.0 {
        return (a.clone(), None);
    }
    if t == 1.0 {
        return (b.clone(), None);
    }
    let av = a.to_f32().expect("float tensor");
    let bv = b.to_f32().expect("float tensor");
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in av.iter().zip(&bv) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na == 0.0 || nb == 0.0 {
        let warning = format!("{name}: zero-norm operand, slerp fell back to lerp");
        return (weighted_sum(name, &[a, b], &[1.0 - t, t]), Some(warning));
    }
    let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    let sin_omega = omega.sin();
    if sin_omega < SLERP_EPSILON {
        return (weighted_sum(name, &[a, b], &[1.0 - t, t]), None);
    }
    let ca = ((1.0 - t) * omega).sin() / sin_omega;
    let cb = (t * omega).sin() / sin_omega;
    let dtype = a.dtype;
    let mut data = Vec::with_capacity(a.data.len());
    for (&x, &y) in av.iter().zip(&bv) {
        dtype.narrow_f64(ca * x as f64 + cb * y as f64, &mut data);
    }
    (
        TensorRecord::new(name, dtype, a.shape.clone(), data).expect("shape and size carried over"),
        None,
    )
}

fn assemble(
    stores: &[&TensorStore],
    recipe_meta: &[(&str, String)],
    per_tensor: impl Fn(&str, &[&TensorRecord]) -> (TensorRecord, Option<String>) + Sync,
) -> Merged {
    let first = stores[0];
    let names: Vec<&String> = first.tensors.keys().collect();
    let results: Vec<(TensorRecord, Option<String>)> = names
        .par_iter()
        .map(|name| {
            let recs: Vec<&TensorRecord> =
                stores.iter().map(|s| &s.tensors[name.as_str()]).collect();
            if !recs[0].dtype.is_float() {
                let warning = format!(
                    "{name}: {} tensor copied from the first operand",
                    recs[0].dtype
                );
                return (recs[0].clone(), Some(warning));
            }
            per_tensor(name, &recs)
        })
        .collect();

    let mut store = TensorStore::new();
    store.metadata = first.metadata.clone();
    for (k, v) in recipe_meta {
        store.metadata.insert(format!("merge.{k}"), v.clone());
    }
    let mut warnings = Vec::new();
    for (name, (rec, warning)) in names.into_iter().zip(results) {
        store.tensors.insert(name.clone(), rec);
        if let Some(w) = warning {
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Merged { store, warnings }
}

fn format_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn lerp(a: &TensorStore, b: &TensorStore, t: f64) -> Result<Merged, MergeError> {
    check_factor(t)?;
    check_structure(&[a, b])?;
    let meta = [("method", "lerp".to_owned()), ("t", t.to_string())];
    Ok(assemble(&[a, b], &meta, |name, recs| {
        (weighted_sum(name, recs, &[1.0 - t, t]), None)
    }))
}

/// Spherical interpolation, each tensor treated as one flat vector.
pub fn slerp(a: &TensorStore, b: &TensorStore, t: f64) -> Result<Merged, MergeError> {
    check_factor(t)?;
    check_structure(&[a, b])?;
    let meta = [("method", "slerp".to_owned()), ("t", t.to_string())];
    Ok(assemble(&[a, b], &meta, |name, recs| {
        slerp_tensor(name, recs[0], recs[1], t)
    }))
}

pub fn soup(stores: &[&TensorStore], weights: &[f64]) -> Result<Merged, MergeError> {
    check_weights(weights, stores.len())?;
    check_structure(stores)?;
    let meta = [
        ("method", "soup".to_owned()),
        ("weights", format_list(weights)),
    ];
    Ok(assemble(stores, &meta, |name, recs| {
        (weighted_sum(name, recs, weights), None)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operand {
    /// Short name used in the canonical recipe string, e.g. `dpo`.
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub operands: Vec<Operand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl MergeRecipe {
    pub fn validate(&self) -> Result<(), MergeError> {
        match self.method {
            MergeMethod::Lerp | MergeMethod::Slerp => {
                if self.operands.len() != 2 {
                    return Err(MergeError::OperandCount {
                        method: self.method.name(),
                        expected: "exactly 2",
                        got: self.operands.len(),
                    });
                }
                check_factor(self.t.ok_or(MergeError::BadFactor(f64::NAN))?)
            }
            MergeMethod::Soup => {
                let weights = self.weights.as_deref().unwrap_or_default();
                check_weights(weights, self.operands.len())
            }
        }
    }

    /// e.g. `lerp_dpo_pre_t0.5` or `soup_dpo_sft_pre_w0.5-0.25-0.25`.
    pub fn canonical_name(&self) -> String {
        let labels: Vec<String> = self
            .operands
            .iter()
            .map(|o| o.label.to_lowercase())
            .collect();
        let coeff = match self.method {
            MergeMethod::Soup => {
                let ws: Vec<String> = self
                    .weights
                    .as_deref()
                    .unwrap_or_default()
                    .iter()
                    .map(|w| w.to_string())
                    .collect();
                format!("w{}", ws.join("-"))
            }
            _ => format!("t{}", self.t.unwrap_or(f64::NAN)),
        };
        format!("{}_{}_{}", self.method.name(), labels.join("_"), coeff)
    }

    /// Merge already-loaded operands (in recipe order).
    pub fn apply(&self, stores: &[&TensorStore]) -> Result<Merged, MergeError> {
        self.validate()?;
        match self.method {
            MergeMethod::Lerp => lerp(stores[0], stores[1], self.t.unwrap_or_default()),
            MergeMethod::Slerp => slerp(stores[0], stores[1], self.t.unwrap_or_default()),
            MergeMethod::Soup => soup(stores, self.weights.as_deref().unwrap_or_default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub recipe: MergeRecipe,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub merges: Vec<ManifestEntry>,
}

pub fn load_recipes(path: impl AsRef<Path>) -> Result<Vec<MergeRecipe>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Run every recipe, writing `<canonical name>.safetensors` per recipe and
/// `manifest.json` into `out_dir`. Each operand file is read once.
pub fn run_recipes(recipes: &[MergeRecipe], out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let mut names = HashSet::new();
    for recipe in recipes {
        recipe.validate()?;
        let name = recipe.canonical_name();
        if !names.insert(name.clone()) {
            return Err(MergeError::DuplicateRecipe(name).into());
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cache: HashMap<PathBuf, TensorStore> = HashMap::new();
    let mut manifest = Manifest::default();
    for recipe in recipes {
        for op in &recipe.operands {
            if !cache.contains_key(&op.path) {
                cache.insert(op.path.clone(), TensorStore::read(&op.path)?);
            }
        }
        let stores: Vec<&TensorStore> = recipe.operands.iter().map(|op| &cache[&op.path]).collect();
        let merged = recipe.apply(&stores)?;
        let name = recipe.canonical_name();
        let file = format!("{name}.safetensors");
        merged.store.write(out_dir.join(&file))?;
        manifest.merges.push(ManifestEntry {
            name,
            file,
            recipe: recipe.clone(),
            warnings: merged.warnings,
        });
    }
    let mpath = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// The seven variants: lerp(DPO, pretrain) at 0.3/0.5/0.7, slerp(DPO,
/// pretrain) at 0.3/0.5, lerp(DPO, SFT) at 0.5, and a 50/25/25 soup of
/// DPO/SFT/pretrain.
pub fn standard_recipes(dpo: &Path, sft: &Path, pre: &Path) -> Vec<MergeRecipe> {
    let op = |label: &str, path: &Path| Operand {
        label: label.to_owned(),
        path: path.to_path_buf(),
    };
    let pair = |method, other: Operand, t: f64| MergeRecipe {
        method,
        operands: vec![op("dpo", dpo), other],
        t: Some(t),
        weights: None,
    };
    vec![
        pair(MergeMethod::Lerp, op("pre", pre), 0.3),
        pair(MergeMethod::Lerp, op("pre", pre), 0.5),
        pair(MergeMethod::Lerp, op("pre", pre), 0.7),
        pair(MergeMethod::Slerp, op("pre", pre), 0.3),
        pair(MergeMethod::Slerp, op("pre", pre), 0.5),
        pair(MergeMethod::Lerp, op("sft", sft), 0.5),
        MergeRecipe {
            method: MergeMethod::Soup,
            operands: vec![op("dpo", dpo), op("sft", sft), op("pre", pre)],
            t: None,
            weights: Some(vec![0.5, 0.25, 0.25]),
        },
    ]
}
