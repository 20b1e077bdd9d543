use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use polyoie::checkpoint;
use polyoie::model::{Model, ModelConfig};
use polyoie::molora::PoolConfig;
use polyoie::vocab::Vocab;
use polyoie_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = polyoie_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &tempfile::TempDir) -> (std::path::PathBuf, Model) {
    let sentence: Vec<String> = "the king issued a charter .".split(' ').map(String::from).collect();
    let vocab = Vocab::build([sentence.as_slice()]);
    let mut cfg = ModelConfig::with_vocab(vocab.len());
    cfg.encoder.hidden_size = 16;
    cfg.encoder.ff_size = 32;
    cfg.encoder.num_layers = 2;
    let mut model = Model::new(cfg, vocab, 3).unwrap();
    model
        .attach(PoolConfig {
            rank: 4,
            ..PoolConfig::default()
        })
        .unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    (path, model)
}

#[test]
fn load_extract_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(&dir);
    let mut handle = ptr::null_mut();
    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { polyoie_model_load(p.as_ptr(), &mut handle) }, PolyoieStatus::Ok);
    assert!(unsafe { polyoie_model_has_pool(handle) });

    let sentence = "the king issued a charter .";
    let mut out = ptr::null_mut();
    let s = cstr(sentence);
    assert_eq!(unsafe { polyoie_model_extract(handle, s.as_ptr(), true, &mut out) }, PolyoieStatus::Ok);
    let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { polyoie_string_free(out) };

    let tokens: Vec<&str> = sentence.split(' ').collect();
    let expected: Vec<serde_json::Value> = model
        .extract(&tokens, true)
        .unwrap()
        .iter()
        .map(|t| {
            let mut v = serde_json::to_value(t).unwrap();
            v["text"] = t.render(&tokens).into();
            v
        })
        .collect();
    assert_eq!(serde_json::from_str::<serde_json::Value>(&json).unwrap(), serde_json::Value::Array(expected));
    unsafe { polyoie_model_free(handle) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut handle = ptr::null_mut();
    let missing = cstr("/nonexistent/model.ckpt");
    assert_eq!(unsafe { polyoie_model_load(missing.as_ptr(), &mut handle) }, PolyoieStatus::Io);
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    assert!(handle.is_null());

    assert_eq!(unsafe { polyoie_model_load(ptr::null(), &mut handle) }, PolyoieStatus::NullArgument);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, "polyoie-checkpoint v9\n").unwrap();
    let p = cstr(junk.to_str().unwrap());
    assert_eq!(unsafe { polyoie_model_load(p.as_ptr(), &mut handle) }, PolyoieStatus::Data);
    assert!(last_error().contains("version"), "{}", last_error());

    let mut out = ptr::null_mut();
    let s = cstr("x");
    assert_eq!(
        unsafe { polyoie_model_extract(ptr::null(), s.as_ptr(), false, &mut out) },
        PolyoieStatus::NullArgument
    );
    unsafe {
        polyoie_model_free(ptr::null_mut());
        polyoie_string_free(ptr::null_mut());
    }
}

#[test]
fn scorers() {
    let mut score = PolyoieScore::default();
    let gold = cstr(r#"[["issued", "the king", "a charter"]]"#);
    assert_eq!(unsafe { polyoie_tuple_match(gold.as_ptr(), gold.as_ptr(), &mut score) }, PolyoieStatus::Ok);
    assert_eq!((score.precision, score.recall, score.f1), (1.0, 1.0, 1.0));
    let none = cstr("[]");
    assert_eq!(unsafe { polyoie_tuple_match(none.as_ptr(), gold.as_ptr(), &mut score) }, PolyoieStatus::Ok);
    assert_eq!(score.f1, 0.0);

    let pred = cstr(r#"[["A Royal Charter", "issued by", "the British King"]]"#);
    let synsets = cstr(r#"[[["[a] Royal Charter", "issued by", "[the] British King"]]]"#);
    assert_eq!(
        unsafe { polyoie_fact_synset_match(pred.as_ptr(), synsets.as_ptr(), &mut score) },
        PolyoieStatus::Ok
    );
    assert_eq!(score.f1, 1.0);

    let bad = cstr(r#"[[["[a Royal Charter", "issued", "x"]]]"#);
    assert_eq!(
        unsafe { polyoie_fact_synset_match(pred.as_ptr(), bad.as_ptr(), &mut score) },
        PolyoieStatus::Data
    );
    let not_json = cstr("{");
    assert_eq!(
        unsafe { polyoie_tuple_match(not_json.as_ptr(), gold.as_ptr(), &mut score) },
        PolyoieStatus::Data
    );
}

#[test]
fn version_matches_the_package() {
    let v = unsafe { CStr::from_ptr(polyoie_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/polyoie.h");
    let src = std::env::temp_dir().join(format!("polyoie_header_{}.c", std::process::id()));
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ return polyoie_version() == 0; }}\n")).unwrap();
    let Ok(status) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    std::fs::remove_file(&src).ok();
    assert!(status.success());
}
