//! The fixture store was written by an independent writer
//! (fixtures/make_tiny_store.py) with records out of key order.

use std::path::PathBuf;

use partloc::featstore::FeatureStore;
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    channel: String,
    dim: usize,
    count: usize,
    records: Vec<Record>,
    total: f64,
}

#[derive(Deserialize)]
struct Record {
    image_id: u64,
    region_id: u32,
    sum: f64,
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn fixture_store_matches_counts_dims_and_checksums() {
    let store = FeatureStore::open(&fixture("tiny.pgfs")).unwrap();
    let want: Expected = serde_json::from_str(&std::fs::read_to_string(fixture("tiny.json")).unwrap()).unwrap();
    assert_eq!(store.channel().name, want.channel);
    assert_eq!(store.channel().dim, want.dim);
    assert_eq!(store.len(), want.count);
    let mut total = 0.0;
    for r in &want.records {
        let v = store.get(r.image_id, r.region_id).unwrap();
        assert_eq!(v.len(), want.dim);
        let s: f64 = v.iter().map(|&x| f64::from(x)).sum();
        assert_eq!(s, r.sum, "record ({}, {})", r.image_id, r.region_id);
        total += s;
    }
    assert!((total - want.total).abs() < 1e-12);
    let keys: Vec<(u64, u32)> = store.keys().collect();
    assert_eq!(keys, vec![(1, 4), (1, 0xFFFF_FF00), (3, 9), (7, 2)]);
}

#[test]
fn rewritten_fixture_reads_back_equal() {
    let store = FeatureStore::open(&fixture("tiny.pgfs")).unwrap();
    let back = FeatureStore::from_bytes(&store.to_bytes()).unwrap();
    assert_eq!(back.to_bytes(), store.to_bytes());
    for (i, r) in store.keys() {
        assert_eq!(back.get(i, r).unwrap(), store.get(i, r).unwrap());
    }
}

#[test]
fn damaged_fixture_rejected() {
    let bytes = std::fs::read(fixture("tiny.pgfs")).unwrap();
    assert!(FeatureStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(FeatureStore::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(FeatureStore::from_bytes(&extra).is_err());
}
