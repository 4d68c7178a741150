//! Embedding surgery for an extended vocabulary.
//!
//! The embedding matrix grows from `[v_old, d]` to `[v_new, d]`. Each new row
//! is the mean of the original rows of the token's decomposition under the
//! pre-merge tokenizer; a surface that decomposes to nothing takes the unk
//! row. An untied output head, when present, receives the same new rows. A
//! tied head has no tensor of its own in the file, so there is nothing to do.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{SurgeryError, TensorError};
use crate::tensorstore::{TensorRecord, TensorStore};
use crate::tokenizer::{TokenId, TokenizerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    pub embed_tensor_name: String,
    /// `None`, or a name absent from the store, means the head is tied.
    pub head_tensor_name: Option<String>,
    pub v_old: usize,
    pub v_new: usize,
    pub hidden_dim: usize,
    pub unk_id: TokenId,
}

impl SurgeryPlan {
    pub fn validate(&self) -> Result<(), SurgeryError> {
        if self.v_new <= self.v_old {
            return Err(SurgeryError::NotGrowing {
                v_old: self.v_old,
                v_new: self.v_new,
            });
        }
        if self.unk_id as usize >= self.v_old {
            return Err(SurgeryError::BadUnk {
                unk: self.unk_id as usize,
                v_old: self.v_old,
            });
        }
        Ok(())
    }

    fn head_in<'a>(&self, store: &'a TensorStore) -> Option<(&str, &'a TensorRecord)> {
        let name = self.head_tensor_name.as_deref()?;
        store.get(name).map(|rec| (name, rec))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieCheck {
    pub tied: bool,
    pub warning: Option<String>,
}

/// Tied iff the plan's head tensor is absent from the store.
pub fn detect_tied(store: &TensorStore, plan: &SurgeryPlan) -> TieCheck {
    match plan.head_in(store) {
        None => TieCheck {
            tied: true,
            warning: None,
        },
        Some((name, head)) => {
            let embed_shape = store.get(&plan.embed_tensor_name).map(|e| e.shape.clone());
            let warning = match embed_shape {
                Some(shape) if shape != head.shape => Some(format!(
                    "head tensor {name:?} has shape {:?} but embedding has shape {shape:?}",
                    head.shape
                )),
                _ => None,
            };
            TieCheck {
                tied: false,
                warning,
            }
        }
    }
}

fn expect_shape(name: &str, rec: &TensorRecord, expected: [usize; 2]) -> Result<(), SurgeryError> {
    if rec.shape != expected {
        return Err(SurgeryError::ShapeMismatch {
            name: name.to_owned(),
            expected: expected.to_vec(),
            actual: rec.shape.clone(),
        });
    }
    if !rec.dtype.is_float() {
        return Err(SurgeryError::NotFloat(name.to_owned()));
    }
    Ok(())
}

fn missing(name: &str) -> crate::Error {
    TensorError::Missing(name.to_owned()).into()
}

/// Grow the embedding (and an untied head) to `v_new` rows. Original rows are
/// copied byte-for-byte; new rows are zero.
pub fn resize_embeddings(store: &TensorStore, plan: &SurgeryPlan) -> crate::Result<TensorStore> {
    plan.validate()?;
    let mut out = store.clone();
    let mut names = vec![plan.embed_tensor_name.as_str()];
    if let Some((head, _)) = plan.head_in(store) {
        names.push(head);
    }
    for name in names {
        let rec = store.get(name).ok_or_else(|| missing(name))?;
        expect_shape(name, rec, [plan.v_old, plan.hidden_dim])?;
        let mut data = rec.data.clone();
        data.resize((plan.v_new * plan.hidden_dim) * rec.dtype.width(), 0);
        let grown = TensorRecord::new(name, rec.dtype, vec![plan.v_new, plan.hidden_dim], data)?;
        out.replace(name, grown)?;
    }
    Ok(out)
}

/// What [`mean_subtoken_init`] did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub tied: bool,
    pub rows_initialized: usize,
    /// New tokens whose surface decomposed to nothing and took the unk row.
    pub unk_fallbacks: usize,
    pub warnings: Vec<String>,
}

/// Check that `new_tokens` assigns every id in `[v_old, v_new)` exactly once.
fn check_coverage(
    plan: &SurgeryPlan,
    new_tokens: &[(TokenId, String)],
) -> Result<(), SurgeryError> {
    let mut seen = HashSet::with_capacity(new_tokens.len());
    for (id, _) in new_tokens {
        let id = *id as usize;
        if id < plan.v_old || id >= plan.v_new {
            return Err(SurgeryError::IdOutOfRange {
                id,
                v_old: plan.v_old,
                v_new: plan.v_new,
            });
        }
        seen.insert(id);
    }
    if seen.len() != new_tokens.len() || seen.len() != plan.v_new - plan.v_old {
        return Err(SurgeryError::IncompleteCoverage {
            v_old: plan.v_old,
            v_new: plan.v_new,
        });
    }
    Ok(())
}

/// Initialize new embedding rows by mean-subtoken decomposition.
///
/// `store` must already be resized; `base` is the tokenizer before the merge.
/// Sums run in `f64` over the frozen original rows and are divided once, then
/// narrowed to the storage dtype.
pub fn mean_subtoken_init(
    store: &TensorStore,
    plan: &SurgeryPlan,
    base: &TokenizerModel,
    new_tokens: &[(TokenId, String)],
) -> crate::Result<(TensorStore, SurgeryReport)> {
    plan.validate()?;
    let d = plan.hidden_dim;
    let embed_name = plan.embed_tensor_name.as_str();
    let embed = store.get(embed_name).ok_or_else(|| missing(embed_name))?;
    expect_shape(embed_name, embed, [plan.v_new, d])?;
    check_coverage(plan, new_tokens)?;

    let tie = detect_tied(store, plan);
    let mut warnings: Vec<String> = tie.warning.iter().cloned().collect();

    let rows: Vec<(usize, Vec<f64>, bool)> = new_tokens
        .par_iter()
        .map(|(id, surface)| {
            let mut ids = base.encode(surface);
            let fallback = ids.is_empty();
            if fallback {
                ids.push(plan.unk_id);
            }
            let mut acc = vec![0f64; d];
            for &src in &ids {
                let src = src as usize;
                if src >= plan.v_old {
                    return Err(SurgeryError::UninitializedSource {
                        surface: surface.clone(),
                        id: src,
                        v_old: plan.v_old,
                    });
                }
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += embed.get_f32(src * d + j) as f64;
                }
            }
            let n = ids.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok((*id as usize, acc, fallback))
        })
        .collect::<Result<_, _>>()?;

    let mut out = store.clone();
    let mut targets = vec![embed_name.to_owned()];
    if let Some((head_name, head)) = plan.head_in(store) {
        expect_shape(head_name, head, [plan.v_new, d])?;
        if head.dtype != embed.dtype {
            warnings.push(format!(
                "head dtype {} differs from embedding dtype {}",
                head.dtype, embed.dtype
            ));
        }
        targets.push(head_name.to_owned());
    }
    for name in &targets {
        let rec = out.tensors.get_mut(name).expect("checked above");
        let width = rec.dtype.width();
        let mut buf = Vec::with_capacity(d * width);
        for (id, values, _) in &rows {
            buf.clear();
            for &v in values {
                rec.dtype.narrow_f64(v, &mut buf);
            }
            rec.data[id * d * width..(id + 1) * d * width].copy_from_slice(&buf);
        }
    }

    let report = SurgeryReport {
        tied: tie.tied,
        rows_initialized: rows.len(),
        unk_fallbacks: rows.iter().filter(|r| r.2).count(),
        warnings,
    };
    Ok((out, report))
}

/// Resize followed by mean-subtoken initialization.
pub fn run_surgery(
    store: &TensorStore,
    plan: &SurgeryPlan,
    base: &TokenizerModel,
    new_tokens: &[(TokenId, String)],
) -> crate::Result<(TensorStore, SurgeryReport)> {
    let resized = resize_embeddings(store, plan)?;
    mean_subtoken_init(&resized, plan, base, new_tokens)
}
