//! Fuzz target bodies. Each must never panic; decoders that accept an input
//! must also re-encode it to something they decode to the same value.

use seqinsert::checkpoint::Checkpoint;
use seqinsert::config::RunConfig;
use seqinsert::dataset::Manifest;
use seqinsert::evaluation::{parse_results, write_results};
use seqinsert::labels::{parse_labels, write_labels, KeySet};
use seqinsert::volume::{RawVolume, SliceSequence};

pub fn volume(data: &[u8]) {
    if RawVolume::parse(data).is_err() {
        assert!(SliceSequence::from_bytes("fuzz", data).is_err());
        return;
    }
    if let Ok(seq) = SliceSequence::from_bytes("fuzz", data) {
        let again = SliceSequence::from_bytes("fuzz", &seq.to_bytes()).expect("re-encoded volume decodes");
        assert_eq!(again.to_bytes(), seq.to_bytes());
    }
}

pub fn labels(data: &[u8]) {
    let keys = KeySet::default();
    if let Ok(set) = parse_labels(data, &keys, None) {
        let mut out = Vec::new();
        write_labels(&mut out, &set).expect("labels encode");
        let again = parse_labels(out.as_slice(), &keys, None).expect("re-encoded labels decode");
        assert_eq!(again, set);
    }
}

pub fn checkpoint(data: &[u8]) {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
}

pub fn config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::load(Some(text), &[]) {
        let again = RunConfig::from_json(&cfg.canonical_json()).expect("canonical config decodes");
        assert_eq!(again.fingerprint(), cfg.fingerprint());
    }
}

pub fn manifest(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = Manifest::from_json(text);
}

pub fn results(data: &[u8]) {
    if let Ok(rows) = parse_results(data) {
        let mut out = Vec::new();
        write_results(&mut out, &rows).expect("results encode");
        let again = parse_results(out.as_slice()).expect("re-encoded results decode");
        let mut out2 = Vec::new();
        write_results(&mut out2, &again).expect("results encode");
        assert_eq!(out, out2);
    }
}
