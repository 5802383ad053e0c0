use std::path::Path;

use protospoof::manifest::{Label, Manifest, ManifestRecord, MissingAudio};
use proptest::prelude::*;

fn parse(text: &str) -> protospoof::Result<Manifest> {
    Manifest::parse_str(text, Path::new("m.tsv"), Path::new("/data"))
}

#[test]
fn three_valid_lines() {
    let m = parse("s1 u1 - bonafide a/u1.wav\ns1 u2 A05 spoof a/u2.wav\ns2 u3 A10 spoof /abs/u3.wav\n").unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!((m.count(Label::Bonafide), m.count(Label::Spoof)), (1, 2));
    assert_eq!(m.records[1].attack, "A05");
    assert_eq!(m.audio_path(&m.records[0]), Path::new("/data/a/u1.wav"));
    assert_eq!(m.audio_path(&m.records[2]), Path::new("/abs/u3.wav"));
}

#[test]
fn bad_label_names_the_line() {
    let err = parse("s1 u1 - bonafide u1.wav\ns1 u2 A01 spoofed u2.wav\n").unwrap_err().to_string();
    assert!(err.contains("m.tsv:2") && err.contains("spoofed"), "{err}");
}

#[test]
fn attack_ids_must_agree_with_the_label() {
    let err = parse("s1 u1 A05 bonafide u1.wav\n").unwrap_err().to_string();
    assert!(err.contains(":1") && err.contains("A05"), "{err}");
    assert!(parse("s1 u1 - spoof u1.wav\n").is_err());
    assert!(ManifestRecord::new("s", "u", "A01", Label::Bonafide, "x.wav").is_err());
}

#[test]
fn duplicates_and_column_counts_are_rejected() {
    let err = parse("s1 u1 - bonafide a.wav\ns1 u1 - bonafide b.wav\n").unwrap_err().to_string();
    assert!(err.contains("duplicate") && err.contains("u1"), "{err}");
    assert!(parse("s1 u1 - bonafide\n").is_err());
    let r = ManifestRecord::new("s", "u", "-", Label::Bonafide, "x.wav").unwrap();
    assert!(Manifest::new(vec![r.clone(), r], "").is_err());
}

#[test]
fn missing_audio_is_reported_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tsv");
    std::fs::write(&p, "s1 u1 - bonafide nowhere.wav\n").unwrap();
    assert!(Manifest::load(&p, MissingAudio::Ignore).is_ok());
    let err = Manifest::load(&p, MissingAudio::Error).unwrap_err().to_string();
    assert!(err.contains("u1"), "{err}");
}

fn record() -> impl Strategy<Value = (String, String, bool, String)> {
    ("[A-Za-z0-9_]{1,8}", "[A-Za-z0-9_]{1,10}", any::<bool>(), "[A-Za-z0-9_/]{1,12}\\.wav")
}

proptest! {
    #[test]
    fn save_then_load_round_trips(rows in prop::collection::vec(record(), 0..20)) {
        let mut records = Vec::new();
        for (i, (spk, utt, spoof, path)) in rows.into_iter().enumerate() {
            let (attack, label) = if spoof { ("A07", Label::Spoof) } else { ("-", Label::Bonafide) };
            records.push(ManifestRecord::new(&spk, &format!("{utt}_{i}"), attack, label, path).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(records, dir.path()).unwrap();
        let p = dir.path().join("m.tsv");
        m.save(&p).unwrap();
        let back = Manifest::load(&p, MissingAudio::Ignore).unwrap();
        prop_assert_eq!(back, m);
    }
}
