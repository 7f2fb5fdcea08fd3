use std::path::PathBuf;

use mamba_adaptor::harness::replay_fixture;
use mamba_adaptor::matd;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ss2d_4x4x2")
}

#[test]
fn committed_ss2d_fixture_replays() {
    let r = replay_fixture(fixture()).unwrap();
    assert!(r.passed());
    assert!(r.max_abs <= 1e-12, "{}", r.max_abs);
}

#[test]
fn fixture_tensors_reencode_bit_identically() {
    for name in ["input.matd", "expected.matd"] {
        let bytes = std::fs::read(fixture().join(name)).unwrap();
        let (t, precision) = matd::decode(&bytes).unwrap();
        assert_eq!(t.shape(), [4, 4, 2]);
        assert_eq!(matd::encode(&t, precision), bytes);
    }
}
