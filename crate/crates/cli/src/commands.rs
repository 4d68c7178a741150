use std::fmt::Display;
use std::path::Path;

use serde_json::{json, Value};
use surgeon_core::error::SurgeryError;
use surgeon_core::inject::{dedup_merge, CandidatePieceList, InjectionReport};
use surgeon_core::merge::{self, load_recipes, Merged};
use surgeon_core::metrics::{dpo_loss, masked_ce, perplexity, DpoBatch, MaskedLogProbs};
use surgeon_core::pack::{bench_loader, pack_corpus, read_jsonl_docs, sample_window, TokenStream};
use surgeon_core::quant::{estimate, load_manifest, manifest_of, QuantScheme};
use surgeon_core::sft::{dedup_md5, pack_sft, read_examples};
use surgeon_core::surgery::{run_surgery, SurgeryPlan};
use surgeon_core::tensorstore::TensorStore;
use surgeon_core::tokenizer::{fertility, FertilityComparison};
use surgeon_core::{normalize, Error, NormalizationConfig, TokenizerModel};

use crate::{Cli, CmdResult, Command, MergeCommand, NormFlags, TensorsCommand};

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(value: &surgeon_core::sft::MaskReport) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

struct Out {
    json: bool,
}

impl Out {
    /// Print `value` as JSON under `--json`, `text` otherwise.
    fn emit(&self, value: Value, text: impl Display) {
        if self.json {
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("serializable")
            );
        } else {
            println!("{text}");
        }
    }
}

impl From<&NormFlags> for NormalizationConfig {
    fn from(f: &NormFlags) -> Self {
        NormalizationConfig {
            nfkc: !f.no_nfkc,
            alif_unify: !f.no_alif,
            strip_tatweel: !f.no_tatweel,
            ya_unify: !f.no_ya,
        }
    }
}

pub fn run(cli: &Cli) -> CmdResult {
    let out = Out {
        json: cli.global.json,
    };
    match &cli.command {
        Command::Normalize {
            flags,
            input,
            output,
        } => {
            let cfg = NormalizationConfig::from(flags);
            let text = read_text(input)?;
            let lines: Vec<String> = text.lines().map(|l| normalize(l, &cfg)).collect();
            let mut body = lines.join("\n");
            if text.ends_with('\n') {
                body.push('\n');
            }
            write_text(output, &body)?;
            out.emit(
                json!({"lines": lines.len(), "output": output}),
                format!("normalized {} lines into {}", lines.len(), output.display()),
            );
        }
        Command::Tokenize { model, input } => {
            let model = TokenizerModel::load(model)?;
            let text = read_text(input)?;
            let ids: Vec<Vec<u32>> = text.lines().map(|l| model.encode(l)).collect();
            let rendered: Vec<String> = ids
                .iter()
                .map(|row| row.iter().map(u32::to_string).collect::<Vec<_>>().join(" "))
                .collect();
            out.emit(json!(ids), rendered.join("\n"));
        }
        Command::Fertility {
            model,
            sample,
            compare,
        } => {
            let text = read_text(sample)?;
            let base = fertility(&TokenizerModel::load(model)?, &text)?;
            match compare {
                None => out.emit(json!(base), base),
                Some(ext) => {
                    let extended = fertility(&TokenizerModel::load(ext)?, &text)?;
                    let cmp = FertilityComparison::new(base, extended);
                    out.emit(json!(cmp), cmp);
                }
            }
        }
        Command::Inject {
            base,
            pieces,
            out: out_path,
            report,
        } => {
            let base = TokenizerModel::load(base)?;
            let cands = CandidatePieceList::load(pieces)?;
            let (extended, rep) = dedup_merge(&base, &cands)?;
            extended.save(out_path)?;
            write_text(report, &rep.to_json_pretty())?;
            out.emit(
                summary_json(&rep),
                format!(
                    "candidates={} single_token={} duplicate={} net_new={} v_old={} v_new={}",
                    rep.candidates,
                    rep.discarded_single_token,
                    rep.discarded_duplicate,
                    rep.net_new,
                    rep.v_old,
                    rep.v_new
                ),
            );
        }
        Command::EmbedInit {
            model,
            base_tokenizer,
            report,
            embed,
            head,
            unk,
            out: out_path,
        } => {
            let store = TensorStore::read(model)?;
            let base = TokenizerModel::load(base_tokenizer)?;
            let rep = InjectionReport::load(report)?;
            let unk_id = unk.or(base.unk_id()).ok_or(SurgeryError::NoUnk)?;
            let hidden_dim = store.require(embed)?.shape.last().copied().unwrap_or(0);
            let plan = SurgeryPlan {
                embed_tensor_name: embed.clone(),
                head_tensor_name: head.clone(),
                v_old: rep.v_old,
                v_new: rep.v_new,
                hidden_dim,
                unk_id,
            };
            let new_tokens: Vec<(u32, String)> = rep
                .new_tokens
                .iter()
                .map(|t| (t.id, t.content.clone()))
                .collect();
            let (result, surgery) = run_surgery(&store, &plan, &base, &new_tokens)?;
            result.write(out_path)?;
            for w in &surgery.warnings {
                log::warn!("{w}");
            }
            out.emit(
                json!(surgery),
                format!(
                    "initialized {} rows ({} from unk), tied={}, wrote {}",
                    surgery.rows_initialized,
                    surgery.unk_fallbacks,
                    surgery.tied,
                    out_path.display()
                ),
            );
        }
        Command::Tensors {
            command: TensorsCommand::Ls { file },
        } => {
            let store = TensorStore::read(file)?;
            let rows: Vec<Value> = store
                .tensors
                .iter()
                .map(|(name, r)| json!({"name": name, "dtype": r.dtype.name(), "shape": r.shape, "bytes": r.byte_len()}))
                .collect();
            let text: Vec<String> = store
                .tensors
                .iter()
                .map(|(name, r)| format!("{name}\t{}\t{:?}\t{}", r.dtype, r.shape, r.byte_len()))
                .collect();
            out.emit(Value::Array(rows), text.join("\n"));
        }
        Command::PackPretrain {
            tokenizer,
            docs,
            out: out_path,
            no_normalize,
        } => {
            let model = TokenizerModel::load(tokenizer)?;
            let docs = read_jsonl_docs(docs)?;
            let cfg = if *no_normalize {
                NormalizationConfig::none()
            } else {
                NormalizationConfig::default()
            };
            let stream = pack_corpus(&docs, &model, &cfg, out_path)?;
            out.emit(
                json!(stream.meta),
                format!(
                    "packed {} docs into {} tokens at {}",
                    stream.meta.created_from,
                    stream.meta.token_count,
                    out_path.display()
                ),
            );
        }
        Command::SampleWindow {
            stream,
            rank,
            step,
            len,
        } => {
            let stream = TokenStream::open(stream)?;
            let w = sample_window(&stream, cli.global.seed, *rank, *step, *len)?;
            let head: Vec<i32> = w.tokens.iter().take(8).copied().collect();
            let tail: Vec<i32> = w.tokens[w.tokens.len().saturating_sub(8)..].to_vec();
            out.emit(
                json!({"start": w.start, "cu_seqlens": w.cu_seqlens, "first": head, "last": tail}),
                format!(
                    "start: {}\ncu_seqlens: {:?}\nfirst: {:?}\nlast: {:?}",
                    w.start, w.cu_seqlens, head, tail
                ),
            );
        }
        Command::BenchLoader {
            stream,
            len,
            windows,
        } => {
            let stream = TokenStream::open(stream)?;
            let b = bench_loader(&stream, *len, *windows, cli.global.seed)?;
            out.emit(
                json!(b),
                format!(
                    "{} windows x {} tokens in {:.3}s: {:.1}M tokens/s",
                    b.windows,
                    b.window_len,
                    b.seconds,
                    b.tokens_per_second / 1e6
                ),
            );
        }
        Command::PackSft {
            tokenizer,
            data,
            system,
            out_dir,
        } => {
            let model = TokenizerModel::load(tokenizer)?;
            let examples = read_examples(data)?;
            let (kept, dropped) = dedup_md5(&examples, system);
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            let report = pack_sft(
                &kept,
                &model,
                system,
                out_dir.join("sft_tokens.bin"),
                out_dir.join("sft_labels.bin"),
            )?;
            write_text(&out_dir.join("mask_report.json"), &pretty(&report))?;
            out.emit(
                json!({"examples": examples.len(), "kept": kept.len(), "dropped": dropped, "report": report}),
                format!("kept {} of {} examples ({} duplicates); {}", kept.len(), examples.len(), dropped, report),
            );
        }
        Command::Merge { command } => run_merge(command, &out)?,
        Command::MaskedCe { logprobs, labels } => {
            let mlp = MaskedLogProbs::read(logprobs, labels)?;
            let loss = masked_ce(&mlp)?;
            let supervised = mlp
                .labels
                .iter()
                .filter(|&&l| l != surgeon_core::sft::IGNORE_INDEX)
                .count();
            let value = json!({"loss": loss, "perplexity": perplexity(loss), "supervised_positions": supervised});
            // Always JSON.
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("serializable")
            );
        }
        Command::DpoLoss { pairs, beta } => {
            let batch = DpoBatch::read_jsonl(pairs, *beta)?;
            let stats = dpo_loss(&batch)?;
            let value = json!({"pairs": batch.pairs.len(), "beta": beta, "loss": stats.loss,
                "mean_margin": stats.mean_margin, "reward_accuracy": stats.reward_accuracy});
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("serializable")
            );
        }
        Command::QuantEstimate { manifest, scheme } => {
            let entries = if manifest.extension().is_some_and(|e| e == "safetensors") {
                manifest_of(&TensorStore::read(manifest)?)
            } else {
                load_manifest(manifest)?
            };
            let scheme = QuantScheme::load(scheme)?;
            let report = estimate(&entries, &scheme)?;
            out.emit(json!(report), &report);
        }
    }
    Ok(())
}

fn summary_json(rep: &InjectionReport) -> Value {
    json!({
        "candidates": rep.candidates,
        "discarded_single_token": rep.discarded_single_token,
        "discarded_duplicate": rep.discarded_duplicate,
        "net_new": rep.net_new,
        "v_old": rep.v_old,
        "v_new": rep.v_new,
    })
}

fn write_merged(merged: Merged, path: &Path, out: &Out) -> CmdResult {
    merged.store.write(path)?;
    out.emit(
        json!({"output": path, "tensors": merged.store.len(), "warnings": merged.warnings}),
        format!("wrote {} tensors to {}", merged.store.len(), path.display()),
    );
    Ok(())
}

fn run_merge(cmd: &MergeCommand, out: &Out) -> CmdResult {
    match cmd {
        MergeCommand::Lerp { a, b, t, out: path } => {
            let merged = merge::lerp(&TensorStore::read(a)?, &TensorStore::read(b)?, *t)?;
            write_merged(merged, path, out)
        }
        MergeCommand::Slerp { a, b, t, out: path } => {
            let merged = merge::slerp(&TensorStore::read(a)?, &TensorStore::read(b)?, *t)?;
            write_merged(merged, path, out)
        }
        MergeCommand::Soup {
            stores,
            weights,
            out: path,
        } => {
            let loaded = stores
                .iter()
                .map(TensorStore::read)
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&TensorStore> = loaded.iter().collect();
            write_merged(merge::soup(&refs, weights)?, path, out)
        }
        MergeCommand::Run { recipes, out_dir } => {
            let recipes = load_recipes(recipes)?;
            let manifest = merge::run_recipes(&recipes, out_dir)?;
            let names: Vec<&str> = manifest.merges.iter().map(|m| m.file.as_str()).collect();
            out.emit(
                json!(manifest),
                format!(
                    "wrote {} merges to {}\n{}",
                    names.len(),
                    out_dir.display(),
                    names.join("\n")
                ),
            );
            Ok(())
        }
    }
}
