use distillkit::data::{scan_and_split, DataError, DatasetManifest};
use distillkit_oracles::split;

#[test]
fn split_is_byte_stable_and_stratified() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    println!("{}", split::check_split(a.path(), b.path(), 42).unwrap());
}

#[test]
fn manifest_json_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    split::write_tree(dir.path(), &[3, 6]).unwrap();
    let (train, test) = scan_and_split(dir.path(), 0, 0.8).unwrap();
    for m in [train, test] {
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}

#[test]
fn missing_root_names_the_path() {
    let err = scan_and_split(std::path::Path::new("/nonexistent/images"), 0, 0.8).unwrap_err();
    assert!(matches!(err, DataError::Root { .. }));
    assert!(err.to_string().contains("/nonexistent/images"));
}
