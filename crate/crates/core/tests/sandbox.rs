mod support;

use cascade_agent::environment::{EnvError, Workspace};
use proptest::prelude::*;
use support::sandbox::{adversarial_paths, audit, build_fixture, check_undo_sequence, Op, UNDO_FILES};

#[test]
fn adversarial_corpus_stays_inside_the_root() {
    assert_eq!(audit().unwrap(), 50 * 12);
}

#[test]
fn every_escaping_path_is_reported_as_such() {
    let tmp = tempfile::tempdir().unwrap();
    let (ws, outside) = build_fixture(tmp.path());
    let ws = Workspace::open(ws).unwrap();
    for p in adversarial_paths(&outside) {
        match ws.resolve(&p) {
            Err(EnvError::PathEscapesSandbox(_)) => {}
            Ok(resolved) => assert!(resolved.starts_with(ws.root()), "{p:?} -> {}", resolved.display()),
            Err(e) => panic!("{p:?}: unexpected {e}"),
        }
    }
}

#[test]
fn symlinks_inside_the_root_are_followed() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("data")).unwrap();
    std::fs::write(tmp.path().join("data/a.csv"), "x\n").unwrap();
    std::os::unix::fs::symlink("data", tmp.path().join("alias")).unwrap();
    let ws = Workspace::open(tmp.path()).unwrap();
    assert_eq!(ws.read("alias/a.csv").unwrap(), b"x\n");
}

#[test]
fn undo_after_create_removes_the_file() {
    check_undo_sequence(&[Op::Edit(2, b"new".to_vec()), Op::Undo(2)]).unwrap();
    check_undo_sequence(&[Op::Undo(0)]).unwrap();
    assert_eq!(UNDO_FILES[2], "fresh.txt");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn undo_restores_exact_bytes(ops in proptest::collection::vec(
        prop_oneof![
            (0..UNDO_FILES.len(), proptest::collection::vec(any::<u8>(), 0..64)).prop_map(|(f, d)| Op::Edit(f, d)),
            (0..UNDO_FILES.len()).prop_map(Op::Undo),
        ],
        0..=20,
    )) {
        check_undo_sequence(&ops).map_err(TestCaseError::fail)?;
    }
}
