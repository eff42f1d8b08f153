//! Dataset generation, the on-disk layout and the tier construction.

use tnn_harness::data::{generate, linear_probe, load_dataset, save_dataset, DataSpec};

#[test]
fn save_then_load_round_trips() {
    let spec = DataSpec {
        samples_per_class: 20,
        ..Default::default()
    };
    let ds = generate(&spec, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn damaged_files_are_rejected() {
    let spec = DataSpec {
        samples_per_class: 5,
        ..Default::default()
    };
    let ds = generate(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let bin = dir.path().join("val.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_dataset(dir.path()).is_err());
    std::fs::write(dir.path().join("index.txt"), "TNDS 9\n").unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn split_is_eighty_twenty() {
    let ds = generate(&DataSpec::default(), 0).unwrap();
    assert_eq!(ds.train.len(), 8000);
    assert_eq!(ds.val.len(), 2000);
}

#[test]
fn linear_probe_separates_the_tiers() {
    let ds = generate(&DataSpec::default(), 7).unwrap();
    let acc = linear_probe(&ds, 10, 0);
    for (class, &a) in acc.iter().enumerate() {
        if ds.is_easy(class) {
            assert!(a >= 0.95, "easy class {class}: {a}");
        } else {
            assert!(a < 0.70, "hard class {class}: {a}");
        }
    }
}
