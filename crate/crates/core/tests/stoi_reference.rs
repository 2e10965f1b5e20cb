//! STOI against scores produced by the pystoi package on the same files
//! (regenerate with scripts/make_stoi_fixtures.py).

use std::collections::BTreeMap;
use std::path::PathBuf;

use bpvae::audio::wav::read_wav;
use bpvae::metrics::stoi;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stoi")
}

#[test]
fn matches_pystoi_within_1e3() {
    let refs: BTreeMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("reference.json")).unwrap()).unwrap();
    assert_eq!(refs.len(), 10);
    for (k, expected) in refs {
        let clean = read_wav(fixtures().join(format!("clean_{k}.wav"))).unwrap();
        let degraded = read_wav(fixtures().join(format!("degraded_{k}.wav"))).unwrap();
        let got = stoi(&clean, &degraded).unwrap();
        assert!((got - expected).abs() < 1e-3, "pair {k}: {got} vs {expected}");
    }
}
