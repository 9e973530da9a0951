use std::fs;

use gaflow::synthdata::{self, SynthConfig, MANIFEST};
use gaflow::Error;

fn small() -> SynthConfig {
    SynthConfig {
        height: 32,
        width: 24,
        ..SynthConfig::default()
    }
}

#[test]
fn save_load_round_trip_is_exact() {
    let samples = synthdata::generate(&small(), 3, 0, 4).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    synthdata::save_dataset(tmp.path(), &samples).unwrap();
    let loaded = synthdata::load_dataset(tmp.path()).unwrap();
    assert_eq!(loaded, samples);

    let again = tmp.path().join("again");
    synthdata::save_dataset(&again, &loaded).unwrap();
    for files in synthdata::read_manifest(tmp.path()).unwrap() {
        for rel in files.values() {
            assert_eq!(fs::read(tmp.path().join(rel)).unwrap(), fs::read(again.join(rel)).unwrap(), "{rel}");
        }
    }
    assert_eq!(
        fs::read(tmp.path().join(MANIFEST)).unwrap(),
        fs::read(again.join(MANIFEST)).unwrap()
    );
}

#[test]
fn manifest_lists_every_role_per_sample() {
    let samples = synthdata::generate(&small(), 3, 0, 2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    synthdata::save_dataset(tmp.path(), &samples).unwrap();
    let groups = synthdata::read_manifest(tmp.path()).unwrap();
    assert_eq!(groups.len(), 2);
    for g in &groups {
        assert_eq!(g.len(), 10);
        assert!(g.contains_key("gt_flow") && g.contains_key("uv"));
    }
}

#[test]
fn unknown_role_reports_its_line_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "# header\n00000/model.ppm model\n00000/x.ppm texture\n";
    fs::write(tmp.path().join(MANIFEST), text).unwrap();
    match synthdata::read_manifest(tmp.path()) {
        Err(Error::Format { offset, detail, .. }) => {
            assert_eq!(offset as usize, text.find("00000/x").unwrap());
            assert!(detail.contains("texture"));
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn malformed_line_and_missing_files_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(MANIFEST), "just-a-path\n").unwrap();
    assert!(matches!(synthdata::read_manifest(tmp.path()), Err(Error::Format { offset: 0, .. })));

    let samples = synthdata::generate(&small(), 3, 0, 1).unwrap();
    synthdata::save_dataset(tmp.path(), &samples).unwrap();
    fs::remove_file(tmp.path().join("00000/model.ppm")).unwrap();
    assert!(matches!(synthdata::load_dataset(tmp.path()), Err(Error::Io { .. })));

    fs::write(tmp.path().join("00000/model.ppm"), b"P6\n3 3\n255\n\x00").unwrap();
    assert!(matches!(synthdata::load_dataset(tmp.path()), Err(Error::Format { .. })));
}

#[test]
fn missing_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = synthdata::load_dataset(&tmp.path().join("absent")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn generated_samples_are_self_consistent() {
    for s in synthdata::generate(&SynthConfig::default(), 7, 0, 8).unwrap() {
        s.validate().unwrap();
        assert!(synthdata::self_consistency_l1(&s).unwrap() < 0.02);
    }
}
