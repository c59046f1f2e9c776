use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use chaincqg::chain::{generate_question, ChainConfig, ParamSet};
use chaincqg::corpus::generate_synthetic;
use chaincqg::model::{CheckpointMeta, ModelConfig};
use chaincqg::preprocess::expand_subdialogues;
use chaincqg::rng;
use chaincqg::sampler::SamplerConfig;
use chaincqg::tokenizer::Vocab;
use chaincqg::trainer::save_params;
use chaincqg_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn c_path(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cqg_last_error()) }.to_str().unwrap().to_string()
}

/// Takes ownership of a library string.
fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { cqg_string_free(s) };
    out
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(cqg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut v: *mut CqgVocab = ptr::null_mut();
    assert_eq!(unsafe { cqg_vocab_load(ptr::null(), &mut v) }, CqgStatus::NullArgument);
    assert!(last_error().contains("path"));
    let p = c("vocab.txt");
    assert_eq!(unsafe { cqg_vocab_load(p.as_ptr(), ptr::null_mut()) }, CqgStatus::NullArgument);
    assert_eq!(unsafe { cqg_vocab_len(ptr::null()) }, 0);
    unsafe {
        cqg_vocab_free(ptr::null_mut());
        cqg_model_free(ptr::null_mut());
        cqg_string_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_is_io_error_naming_the_path() {
    let mut v: *mut CqgVocab = ptr::null_mut();
    let p = c("/nonexistent/dir/vocab.txt");
    assert_eq!(unsafe { cqg_vocab_load(p.as_ptr(), &mut v) }, CqgStatus::Io);
    assert!(v.is_null());
    assert!(last_error().contains("/nonexistent/dir/vocab.txt"));
}

#[test]
fn preprocess_matches_golden_file() {
    let line = std::fs::read_to_string(core_fixture("three_turn_dialogue.jsonl")).unwrap();
    let want = std::fs::read_to_string(core_fixture("three_turn_expected.jsonl")).unwrap();
    let input = c(line.trim_end());
    let mut out: *mut c_char = ptr::null_mut();
    let s = unsafe { cqg_preprocess(input.as_ptr(), true, true, true, &mut out) };
    assert_eq!(s, CqgStatus::Ok, "{}", last_error());
    assert_eq!(take(out), want);
    assert_eq!(last_error(), "");

    let bad = c("{\"id\": 3}");
    let s = unsafe { cqg_preprocess(bad.as_ptr(), true, true, true, &mut out) };
    assert_eq!(s, CqgStatus::Parse);
}

#[test]
fn score_returns_report_json() {
    let cand = c(r#"["the cat sat", "a b c d"]"#);
    let refs = c(r#"["the cat sat", "a b c d"]"#);
    let mut out: *mut c_char = ptr::null_mut();
    let s = unsafe { cqg_score(cand.as_ptr(), refs.as_ptr(), &mut out) };
    assert_eq!(s, CqgStatus::Ok, "{}", last_error());
    let report: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(report["bleu1"], 1.0);
    assert_eq!(report["rouge_l"], 1.0);

    let short = c(r#"["the cat"]"#);
    let s = unsafe { cqg_score(short.as_ptr(), refs.as_ptr(), &mut out) };
    assert_eq!(s, CqgStatus::Argument);
}

#[test]
fn generate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let dialogues = generate_synthetic(4, 1).unwrap();
    let vocab = Vocab::build(&dialogues, 500).unwrap();
    let vocab_path = dir.path().join("vocab.txt");
    vocab.save(&vocab_path).unwrap();
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab.len(),
        max_positions: 256,
        dropout: 0.0,
    };
    let cc = ChainConfig::default();
    let params = ParamSet::<f32>::init(&cc, &cfg, 4);
    let ckpt = dir.path().join("model.ckpt");
    save_params(&ckpt, &params, &cc, CheckpointMeta::default()).unwrap();

    let mut m: *mut CqgModel = ptr::null_mut();
    let s = unsafe { cqg_model_load(c_path(&ckpt).as_ptr(), c_path(&vocab_path).as_ptr(), &mut m) };
    assert_eq!(s, CqgStatus::Ok, "{}", last_error());

    let ex = &expand_subdialogues(&dialogues[0]).unwrap()[1];
    let sampler = SamplerConfig {
        max_new_tokens: 6,
        ..SamplerConfig::greedy()
    };
    let ex_json = c(&serde_json::to_string(ex).unwrap());
    let sc_json = c(&serde_json::to_string(&sampler).unwrap());
    let mut out: *mut c_char = ptr::null_mut();
    let mut truncated = false;
    let s = unsafe { cqg_generate(m, ex_json.as_ptr(), sc_json.as_ptr(), &mut out, &mut truncated) };
    assert_eq!(s, CqgStatus::Ok, "{}", last_error());
    let text = take(out);

    let g = generate_question(&cc, &params, ex, &vocab, &sampler, &mut rng::seeded(sampler.seed)).unwrap();
    assert_eq!(text, vocab.decode(&g.ids).unwrap());
    assert_eq!(truncated, g.truncated);

    let bad_sampler = c(r#"{"top_p": 0.0}"#);
    let s = unsafe { cqg_generate(m, ex_json.as_ptr(), bad_sampler.as_ptr(), &mut out, ptr::null_mut()) };
    assert_eq!(s, CqgStatus::Config);
    unsafe { cqg_model_free(m) };

    // A vocabulary that does not match the checkpoint is refused.
    let other = Vocab::build(&generate_synthetic(40, 9).unwrap(), 500).unwrap();
    assert_ne!(other.len(), vocab.len());
    let other_path = dir.path().join("other.txt");
    other.save(&other_path).unwrap();
    let mut m2: *mut CqgModel = ptr::null_mut();
    let s = unsafe { cqg_model_load(c_path(&ckpt).as_ptr(), c_path(&other_path).as_ptr(), &mut m2) };
    assert_eq!(s, CqgStatus::Config);
    assert!(m2.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(header_dir.join("chaincqg.h")).unwrap();
    for f in ["cqg_vocab_load", "cqg_model_load", "cqg_generate", "cqg_preprocess", "cqg_score", "cqg_last_error"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"chaincqg.h\"\n\
         int main(void) {\n\
           CqgModel *m = 0; char *q = 0; bool t = false;\n\
           CqgStatus s = cqg_generate(m, \"{}\", 0, &q, &t);\n\
           cqg_string_free(q);\n\
           return s == CQG_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let compiler = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&compiler)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header_dir)
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping C compile: {compiler} unavailable ({e})"),
    }
}
