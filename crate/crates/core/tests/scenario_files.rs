use safe_esc::scenarios::{builtin, load, resolve, save, ScenarioError, BUILTIN_NAMES};

#[test]
fn builtins_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for name in BUILTIN_NAMES {
        let s = builtin(name).unwrap();
        let path = dir.path().join(format!("{name}.json"));
        save(&s, &path).unwrap();
        assert_eq!(load(&path).unwrap(), s);
        assert_eq!(resolve(path.to_str().unwrap()).unwrap(), s);
    }
}

#[test]
fn schema_errors_name_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut value: serde_json::Value = serde_json::from_str(&builtin("paper-1d").unwrap().to_json()).unwrap();
    value["esc"]["k"] = serde_json::json!("fast");
    std::fs::write(&path, value.to_string()).unwrap();
    match load(&path) {
        Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "esc.k"),
        other => panic!("expected schema error, got {other:?}"),
    }
    assert!(matches!(load(dir.path().join("missing.json")), Err(ScenarioError::Io { .. })));
}
