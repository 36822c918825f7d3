use std::fs;
use std::path::Path;

use bapgan_core::data::{
    emit_phantom_dataset, load_manifest, measure_gap_width, Dataset, PhantomDatasetSpec, Split,
};
use bapgan_core::Error;

fn touch_png(dir: &Path, name: &str) {
    bapgan_core::data::save_png(&dir.join(name), &[0.0; 16 * 16], 16).unwrap();
}

#[test]
fn valid_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    for n in ["a.png", "b.png", "c.png"] {
        touch_png(dir.path(), n);
    }
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,age_years,split,dataset_tag\na.png,5,train,x\nb.png,0,val,x\nc.png,19.5,,x\n").unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.records.len(), 3);
    assert_eq!(m.records[1].split, Some(Split::Val));
    assert_eq!(m.records[2].split, None);
    assert_eq!(m.split_counts()[&Some(Split::Train)], 1);
    assert!(m.warnings.is_empty());
}

#[test]
fn split_column_is_optional() {
    let dir = tempfile::tempdir().unwrap();
    touch_png(dir.path(), "a.png");
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,age_years,dataset_tag\na.png,5,x\n").unwrap();
    assert_eq!(load_manifest(&path).unwrap().records[0].split, None);
}

#[test]
fn out_of_range_age_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    for n in ["a.png", "b.png"] {
        touch_png(dir.path(), n);
    }
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,age_years,split,dataset_tag\na.png,5,train,x\nb.png,25,train,x\n").unwrap();
    match load_manifest(&path) {
        Err(Error::Ingestion { line: Some(3), message, .. }) => assert!(message.contains("25")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_image_and_malformed_rows_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,age_years,split,dataset_tag\nnope.png,5,train,x\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Ingestion { line: Some(2), .. })));
    touch_png(dir.path(), "a.png");
    fs::write(&path, "path,age_years,split,dataset_tag\na.png,five,train,x\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Ingestion { line: Some(2), .. })));
    fs::write(&path, "path,age_years,split,dataset_tag\na.png,5,holdout,x\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Ingestion { line: Some(2), .. })));
}

#[test]
fn duplicates_warn_but_are_kept() {
    let dir = tempfile::tempdir().unwrap();
    touch_png(dir.path(), "a.png");
    let path = dir.path().join("m.csv");
    fs::write(&path, "path,age_years,split,dataset_tag\na.png,5,train,x\na.png,6,train,x\n").unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.records.len(), 2);
    assert_eq!(m.warnings.len(), 1);
}

#[test]
fn emitted_phantoms_round_trip_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomDatasetSpec::new(25, 64, 3);
    let records = emit_phantom_dataset(&spec, dir.path()).unwrap();
    assert_eq!(records.len(), 25);
    let m = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(m.records.len(), 25);
    assert_eq!((m.records_in(Split::Train).len(), m.records_in(Split::Val).len()), (20, 3));
    let ds = Dataset::load(&m, &m.records, 64, 5).unwrap();
    let mut meta = csv::Reader::from_path(dir.path().join("phantom_meta.csv")).unwrap();
    assert_eq!(meta.headers().unwrap(), vec!["path", "true_gap_px", "identity_seed"]);
    for (i, row) in meta.records().enumerate() {
        let row = row.unwrap();
        assert_eq!(&row[0], ds.paths[i]);
        let gap: usize = row[1].parse().unwrap();
        let measured = measure_gap_width(&ds.images[i], 64);
        assert!(measured.abs_diff(gap) <= 1, "{}: {measured} vs {gap}", ds.paths[i]);
    }
    let again = tempfile::tempdir().unwrap();
    emit_phantom_dataset(&spec, again.path()).unwrap();
    assert_eq!(
        fs::read(dir.path().join("manifest.csv")).unwrap(),
        fs::read(again.path().join("manifest.csv")).unwrap()
    );
}
