use std::ffi::{c_char, CString};
use std::fs;
use std::path::Path;
use std::ptr;

use bem_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { bem_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&b| b as u8).collect();
    String::from_utf8(bytes).unwrap()
}

const VOCAB: &str = "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n.\nthe\npatient\nhad\nfever\n##s\nand\naspirin\nwas\ngiven\n";

fn setup(dir: &Path) -> *mut BemVocab {
    fs::write(dir.join("vocab.txt"), VOCAB).unwrap();
    let mut corpus = String::new();
    for i in 0..20 {
        corpus.push_str(&format!(
            "{{\"doc_id\":\"d{i}\",\"text\":\"The patient had fevers and aspirin was given. Aspirin and fever.\"}}\n"
        ));
    }
    fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
    let core_vocab = bem_core::tokenizer::Vocab::load(dir.join("vocab.txt")).unwrap();
    bem_core::lexicon::EntityLexicon::from_surfaces(["aspirin", "fever"], "ENT", &core_vocab)
        .unwrap()
        .save(dir.join("lexicon.json"), None)
        .unwrap();
    let mut vocab = ptr::null_mut();
    let status = unsafe { bem_vocab_load(cpath(&dir.join("vocab.txt")).as_ptr(), true, &mut vocab) };
    assert_eq!(status, BemStatus::Ok, "{}", last_error());
    vocab
}

#[test]
fn tokenize_into_caller_buffer() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = setup(dir.path());
    assert_eq!(unsafe { bem_vocab_size(vocab) }, 15);
    let text = c("The patient had fevers.");
    let mut len = 0usize;
    let status = unsafe { bem_tokenize(vocab, text.as_ptr(), ptr::null_mut(), 0, &mut len) };
    assert_eq!(status, BemStatus::BufferTooSmall);
    assert_eq!(len, 6);
    let mut ids = vec![0u32; len];
    let status = unsafe { bem_tokenize(vocab, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) };
    assert_eq!(status, BemStatus::Ok);
    assert_eq!(ids, [6, 7, 8, 9, 10, 5]);
    unsafe { bem_vocab_free(vocab) };
}

#[test]
fn errors_carry_status_and_message() {
    let mut vocab = ptr::null_mut();
    let missing = c("/nonexistent/vocab.txt");
    assert_eq!(unsafe { bem_vocab_load(missing.as_ptr(), true, &mut vocab) }, BemStatus::Io);
    assert!(vocab.is_null());
    assert!(last_error().contains("/nonexistent/vocab.txt"));
    assert_eq!(unsafe { bem_vocab_load(ptr::null(), true, &mut vocab) }, BemStatus::NullArgument);

    let mut buf = [0 as c_char; 4];
    let full = unsafe { bem_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(full > 3);
    assert_eq!(buf[3], 0);

    let mut len = 0;
    assert_eq!(
        unsafe { bem_tokenize(ptr::null(), c("x").as_ptr(), ptr::null_mut(), 0, &mut len) },
        BemStatus::NullArgument
    );
    unsafe {
        bem_vocab_free(ptr::null_mut());
        bem_lexicon_free(ptr::null_mut());
    }
}

#[test]
fn mask_corpus_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = setup(dir.path());
    let mut lexicon = ptr::null_mut();
    let status = unsafe { bem_lexicon_load(cpath(&dir.path().join("lexicon.json")).as_ptr(), &mut lexicon) };
    assert_eq!(status, BemStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { bem_lexicon_size(lexicon) }, 2);

    let mut opts = bem_masking_options_default();
    assert_eq!(opts.window_len, 128);
    assert_eq!(opts.rho, 0.3);
    opts.strategy = BemStrategy::Bem;
    opts.rho = 0.5;
    opts.batch_size = 4;
    opts.window_len = 16;
    let corpus = cpath(&dir.path().join("corpus.jsonl"));
    let out = dir.path().join("out.bin");
    let status = unsafe { bem_mask_corpus(corpus.as_ptr(), vocab, lexicon, &opts, BemFormat::Binary, cpath(&out).as_ptr()) };
    assert_eq!(status, BemStatus::Ok, "{}", last_error());
    let (header, examples) = bem_core::batchfile::read_batch_file(&out).unwrap();
    assert_eq!(header.config.rho, 0.5);
    assert!(examples.iter().any(|e| !e.masked_positions.is_empty()));

    let status = unsafe { bem_mask_corpus(corpus.as_ptr(), vocab, ptr::null(), &opts, BemFormat::Binary, cpath(&out).as_ptr()) };
    assert_eq!(status, BemStatus::InvalidConfig);
    opts.rho = 1.5;
    let status = unsafe { bem_mask_corpus(corpus.as_ptr(), vocab, lexicon, &opts, BemFormat::Jsonl, cpath(&out).as_ptr()) };
    assert_eq!(status, BemStatus::InvalidConfig);
    unsafe {
        bem_lexicon_free(lexicon);
        bem_vocab_free(vocab);
    }
}

#[test]
fn evaluate_fixture() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data");
    let mut m = BemMetrics { questions: 0, p_at_1: 0.0, r_at_3: 0.0, mrr: 0.0, strict_acc: 0.0, lenient_acc: 0.0 };
    let status = unsafe {
        bem_evaluate(
            cpath(&data.join("sentence_predictions.jsonl")).as_ptr(),
            cpath(&data.join("sentence_golds.jsonl")).as_ptr(),
            BemDataset::Covidqa,
            &mut m,
        )
    };
    assert_eq!(status, BemStatus::Ok, "{}", last_error());
    assert_eq!(m.questions, 3);
    assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
    assert!(m.strict_acc.is_nan());
}

#[test]
fn header_declares_every_export() {
    let header = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/bem.h")).unwrap();
    for f in [
        "bem_last_error", "bem_vocab_load", "bem_vocab_size", "bem_vocab_free", "bem_tokenize", "bem_lexicon_load",
        "bem_lexicon_size", "bem_lexicon_free", "bem_masking_options_default", "bem_mask_corpus", "bem_evaluate",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}
