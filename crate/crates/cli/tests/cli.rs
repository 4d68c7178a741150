use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use surgeon_core::sft::{IM_END, IM_START};
use surgeon_core::tensorstore::{Dtype, TensorRecord, TensorStore};
use surgeon_core::tokenizer::SpecialTokens;
use surgeon_core::TokenizerModel;

fn surgeon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surgeon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_of(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is one JSON document")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Bytes, one merge for "ab", ChatML markers, eos and unk.
fn write_tokenizer(dir: &Path) -> PathBuf {
    let specials = SpecialTokens {
        eos: Some("<|endoftext|>".into()),
        unk: Some("<|unk|>".into()),
    };
    let model = TokenizerModel::from_merges(
        &[("a", "b")],
        &["<|endoftext|>", "<|unk|>", IM_START, IM_END],
        specials,
    )
    .unwrap();
    let path = dir.join("tok.json");
    model.save(&path).unwrap();
    path
}

fn write_store(path: &Path, rows: usize, d: usize, offset: f32) {
    let values: Vec<f32> = (0..rows * d).map(|i| i as f32 * 0.25 + offset).collect();
    let mut s = TensorStore::new();
    s.insert(
        "embed",
        TensorRecord::from_f32("embed", Dtype::F32, vec![rows, d], &values).unwrap(),
    )
    .unwrap();
    s.insert(
        "norm.weight",
        TensorRecord::from_f32("norm.weight", Dtype::BF16, vec![d], &vec![1.0 + offset; d])
            .unwrap(),
    )
    .unwrap();
    s.write(path).unwrap();
}

#[test]
fn usage_and_help_exit_codes() {
    assert_eq!(surgeon(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        surgeon(&["fertility", "--no-such-flag"]).status.code(),
        Some(1)
    );
    let help = surgeon(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in [
        "normalize",
        "tokenize",
        "fertility",
        "inject",
        "embed-init",
        "tensors",
        "pack-pretrain",
        "sample-window",
        "bench-loader",
        "pack-sft",
        "merge",
        "masked-ce",
        "dpo-loss",
        "quant-estimate",
    ] {
        assert!(stdout(&help).contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_input_is_io_error() {
    let out = surgeon(&["tensors", "ls", "/definitely/not/here.safetensors"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.safetensors"));
}

#[test]
fn validation_error_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.safetensors");
    write_store(&a, 4, 2, 0.0);
    let out = surgeon(&[
        "merge",
        "lerp",
        p(&a),
        p(&a),
        "-t",
        "1.5",
        "--out",
        p(&dir.path().join("o.safetensors")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn normalize_tokenize_fertility() {
    let dir = tempfile::tempdir().unwrap();
    let tok = write_tokenizer(dir.path());
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "إلى مدرسةـ\nab ab\n").unwrap();
    let normed = dir.path().join("norm.txt");
    assert!(surgeon(&["normalize", p(&input), p(&normed)])
        .status
        .success());
    assert_eq!(
        std::fs::read_to_string(&normed).unwrap(),
        "الي مدرسة\nab ab\n"
    );
    let kept = dir.path().join("kept.txt");
    assert!(surgeon(&["normalize", "--no-tatweel", p(&input), p(&kept)])
        .status
        .success());
    assert!(std::fs::read_to_string(&kept).unwrap().contains('ـ'));

    let ids = surgeon(&["tokenize", p(&tok), p(&normed)]);
    assert!(ids.status.success());
    assert_eq!(stdout(&ids).lines().nth(1).unwrap(), "256 32 256");

    let fert = surgeon(&["fertility", p(&tok), p(&normed)]);
    assert_eq!(fert.status.code(), Some(0));
    assert!(stdout(&fert).contains("word_count=4"));
    let v = json_of(&surgeon(&["--json", "fertility", p(&tok), p(&normed)]));
    assert_eq!(v["word_count"], 4);
}

#[test]
fn inject_then_embed_init() {
    let dir = tempfile::tempdir().unwrap();
    let tok = write_tokenizer(dir.path());
    let pieces = dir.path().join("pieces.txt");
    std::fs::write(&pieces, "كتاب\t-1.5\nab\nكتاب\nقلم\n").unwrap();
    let (ext, report) = (dir.path().join("ext.json"), dir.path().join("report.json"));
    let v = json_of(&surgeon(&[
        "--json",
        "inject",
        p(&tok),
        p(&pieces),
        "--out",
        p(&ext),
        "--report",
        p(&report),
    ]));
    assert_eq!(
        (v["net_new"].as_u64(), v["discarded_single_token"].as_u64()),
        (Some(2), Some(1))
    );
    let v_old = v["v_old"].as_u64().unwrap() as usize;

    let model = dir.path().join("model.safetensors");
    write_store(&model, v_old, 3, 0.0);
    let out = dir.path().join("grown.safetensors");
    let v = json_of(&surgeon(&[
        "--json",
        "embed-init",
        p(&model),
        p(&tok),
        p(&report),
        "--embed",
        "embed",
        "--out",
        p(&out),
    ]));
    assert_eq!(v["rows_initialized"], 2);
    assert_eq!(v["tied"], true);

    let ls = json_of(&surgeon(&["tensors", "ls", p(&out), "--json"]));
    assert_eq!(ls[0]["name"], "embed");
    assert_eq!(ls[0]["shape"][0].as_u64().unwrap() as usize, v_old + 2);
}

#[test]
fn pack_and_sample_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let tok = write_tokenizer(dir.path());
    let docs = dir.path().join("docs.jsonl");
    let lines: Vec<String> = (0..300)
        .map(|i| format!("{{\"text\": \"doc {i} ab كتاب {}\"}}", "x".repeat(i % 7)))
        .collect();
    std::fs::write(&docs, lines.join("\n")).unwrap();

    let (s1, s4) = (dir.path().join("one.bin"), dir.path().join("four.bin"));
    let meta = json_of(&surgeon(&[
        "--json",
        "--threads",
        "1",
        "pack-pretrain",
        p(&tok),
        p(&docs),
        "--out",
        p(&s1),
    ]));
    assert_eq!(meta["created_from"], 300);
    assert!(surgeon(&[
        "--threads",
        "4",
        "pack-pretrain",
        p(&tok),
        p(&docs),
        "--out",
        p(&s4)
    ])
    .status
    .success());
    assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s4).unwrap());
    assert!(dir.path().join("one.meta.json").exists());

    let args = [
        "--json",
        "sample-window",
        p(&s1),
        "--seed",
        "7",
        "--rank",
        "1",
        "--step",
        "3",
        "--len",
        "64",
    ];
    let (a, b) = (json_of(&surgeon(&args)), json_of(&surgeon(&args)));
    assert_eq!(a, b);
    assert_eq!(a["cu_seqlens"][0], 0);
    assert_eq!(a["first"].as_array().unwrap().len(), 8);

    let bench = json_of(&surgeon(&[
        "--json",
        "bench-loader",
        p(&s1),
        "--len",
        "32",
        "--windows",
        "10",
    ]));
    assert_eq!(bench["tokens"], 320);
    assert_eq!(
        surgeon(&["bench-loader", p(&s1), "--len", "32", "--windows", "0"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn pack_sft_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let tok = write_tokenizer(dir.path());
    let data = dir.path().join("sft.jsonl");
    let ex = r#"{"turns": [{"role": "user", "content": "سؤال"}, {"role": "assistant", "content": "جواب"}]}"#;
    let other =
        r#"{"turns": [{"role": "user", "content": "q"}, {"role": "assistant", "content": "ab"}]}"#;
    std::fs::write(&data, format!("{ex}\n{ex}\n{other}\n")).unwrap();
    let out = dir.path().join("out");
    let v = json_of(&surgeon(&[
        "--json",
        "pack-sft",
        p(&tok),
        p(&data),
        "--system",
        "S",
        "--out-dir",
        p(&out),
    ]));
    assert_eq!(
        (v["kept"].as_u64(), v["dropped"].as_u64()),
        (Some(2), Some(1))
    );
    let t = std::fs::metadata(out.join("sft_tokens.bin")).unwrap().len();
    let l = std::fs::metadata(out.join("sft_labels.bin")).unwrap().len();
    assert_eq!(t, l);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("mask_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["total_tokens"].as_u64().unwrap() * 4, t);
}

#[test]
fn merge_commands() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..3)
        .map(|i| dir.path().join(format!("m{i}.safetensors")))
        .collect();
    for (i, path) in paths.iter().enumerate() {
        write_store(path, 4, 2, i as f32);
    }
    let out = dir.path().join("lerp.safetensors");
    assert!(surgeon(&[
        "merge",
        "lerp",
        p(&paths[0]),
        p(&paths[1]),
        "-t",
        "0.5",
        "--out",
        p(&out)
    ])
    .status
    .success());
    let merged = TensorStore::read(&out).unwrap();
    assert_eq!(merged.get("embed").unwrap().get_f32(0), 0.5);
    assert_eq!(merged.metadata["merge.method"], "lerp");

    let soup = dir.path().join("soup.safetensors");
    let args = [
        "merge",
        "soup",
        p(&paths[0]),
        p(&paths[1]),
        p(&paths[2]),
        "--weights",
        "0.5,0.25,0.25",
        "--out",
        p(&soup),
    ];
    assert!(surgeon(&args).status.success());
    assert_eq!(
        TensorStore::read(&soup)
            .unwrap()
            .get("embed")
            .unwrap()
            .get_f32(0),
        0.75
    );
    let bad = [
        "merge",
        "soup",
        p(&paths[0]),
        p(&paths[1]),
        "--weights",
        "0.6,0.6",
        "--out",
        p(&soup),
    ];
    let o = surgeon(&bad);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("weights must sum to 1"));

    let recipes = surgeon_core::merge::standard_recipes(&paths[0], &paths[1], &paths[2]);
    let rpath = dir.path().join("recipes.json");
    std::fs::write(&rpath, serde_json::to_string(&recipes).unwrap()).unwrap();
    let run_dir = dir.path().join("runs");
    let v = json_of(&surgeon(&[
        "--json",
        "merge",
        "run",
        p(&rpath),
        "--out-dir",
        p(&run_dir),
    ]));
    assert_eq!(v["merges"].as_array().unwrap().len(), 7);
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir
        .join("soup_dpo_sft_pre_w0.5-0.25-0.25.safetensors")
        .exists());
}

#[test]
fn loss_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (lp, lb) = (dir.path().join("lp.bin"), dir.path().join("lb.bin"));
    std::fs::write(
        &lp,
        [-1.0f64, -2.0, -3.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    std::fs::write(
        &lb,
        [-100i32, 7, 9]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let v = json_of(&surgeon(&["masked-ce", p(&lp), p(&lb)]));
    assert_eq!(v["loss"], 2.5);

    let pairs = dir.path().join("pairs.jsonl");
    let row = r#"{"policy_chosen_lp": -3, "policy_rejected_lp": -3, "ref_chosen_lp": -3, "ref_rejected_lp": -3}"#;
    std::fs::write(&pairs, format!("{row}\n{row}\n")).unwrap();
    let v = json_of(&surgeon(&["dpo-loss", p(&pairs), "--beta", "0.1"]));
    assert!((v["loss"].as_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
    assert_eq!(v["reward_accuracy"], 0.5);
}

#[test]
fn quant_estimate_from_listing() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.safetensors");
    write_store(&model, 4, 256, 0.0);
    let listing = surgeon(&["tensors", "ls", p(&model), "--json"]);
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, &listing.stdout).unwrap();
    let v = json_of(&surgeon(&[
        "--json",
        "quant-estimate",
        p(&manifest),
        "--scheme",
        "q4_k_m",
    ]));
    assert_eq!(v["total_params"], 4 * 256 + 256);
    assert_eq!(v["fallback_tensor_count"], 1);

    let scheme = dir.path().join("scheme.json");
    std::fs::write(
        &scheme,
        r#"{"name": "t", "nominal_bpw": 4, "block_size": 256, "fallback_bpw": 8}"#,
    )
    .unwrap();
    let v = json_of(&surgeon(&[
        "--json",
        "quant-estimate",
        p(&model),
        "--scheme",
        p(&scheme),
    ]));
    assert_eq!(v["effective_bpw"], 4.0);
}
