//! Committed mask files under `tests/golden/`. Regenerate with
//! `GEM_BLESS=1 cargo test -p gem-core --test mask_golden` only when the
//! format version changes.

use std::path::PathBuf;

use gem_core::mask_engine::{
    build_masks, load_masks, mask_set_from_bytes, mask_set_to_bytes, save_masks, MaskRecipe,
    MaskSet,
};
use gem_core::model_store::{Snapshot, Tensor};
use gem_core::scoring::DEFAULT_EPS;
use gem_core::strategies::{make_mask, StrategyName, StrategySpec};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn two_layer_gem() -> MaskSet {
    let w = Snapshot::all_tunable(vec![
        Tensor::new("A", vec![4], vec![1.0; 4]).unwrap(),
        Tensor::new("B", vec![4], vec![1.0; 4]).unwrap(),
    ])
    .unwrap();
    let g = Snapshot::all_tunable(vec![
        Tensor::new("A", vec![4], vec![4.0, 0.0, 0.0, 0.0]).unwrap(),
        Tensor::new("B", vec![4], vec![1.0; 4]).unwrap(),
    ])
    .unwrap();
    build_masks(&w, &g, 0.25, &MaskRecipe::GEM, DEFAULT_EPS)
        .unwrap()
        .with_strategy_name("gem")
        .with_gradient_source("golden")
}

fn random_2d() -> MaskSet {
    let w = Snapshot::all_tunable(vec![
        Tensor::new("q_proj", vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap(),
        Tensor::new("v_proj", vec![2, 1], vec![1.0, -2.0]).unwrap(),
    ])
    .unwrap();
    make_mask(
        &StrategySpec::new(StrategyName::Random, 0.5).with_seed(42),
        &w,
        &w,
    )
    .unwrap()
    .with_gradient_source("golden")
}

/// Header and layer records written field by field, independently of the
/// library encoder.
fn encode_records(layers: &[(&str, &[u64], &[u64])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, dims, idx) in layers {
        body.extend((name.len() as u32).to_le_bytes());
        body.extend(name.as_bytes());
        body.extend((dims.len() as u32).to_le_bytes());
        dims.iter().for_each(|d| body.extend(d.to_le_bytes()));
        body.extend((idx.len() as u64).to_le_bytes());
        idx.iter().for_each(|i| body.extend(i.to_le_bytes()));
    }
    let mut out = b"GEMM".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((layers.len() as u32).to_le_bytes());
    out.extend((20 + body.len() as u64).to_le_bytes());
    out.extend(body);
    out
}

fn check_golden(name: &str, ms: &MaskSet) {
    let path = golden(name);
    let bytes = mask_set_to_bytes(ms).unwrap();
    if std::env::var_os("GEM_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &bytes).unwrap();
    }
    let committed = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(bytes, committed, "{name} differs from the committed bytes");
    assert_eq!(load_masks(&path).unwrap(), *ms);
}

#[test]
fn two_layer_gem_golden() {
    let ms = two_layer_gem();
    assert_eq!(ms.provenance.plan.budgets(), vec![0, 2]);
    check_golden("two_layer_gem.gemm", &ms);
    let bytes = std::fs::read(golden("two_layer_gem.gemm")).unwrap();
    let records = encode_records(&[("A", &[4], &[]), ("B", &[4], &[0, 1])]);
    assert_eq!(&bytes[..records.len()], &records[..]);
    let trailer: serde_json::Value = serde_json::from_slice(&bytes[records.len()..]).unwrap();
    assert_eq!(trailer["strategy"], "gem");
    assert_eq!(trailer["plan"]["total_budget"], 2);
}

#[test]
fn random_2d_golden() {
    let ms = random_2d();
    check_golden("random_2d_seed42.gemm", &ms);
    let bytes = std::fs::read(golden("random_2d_seed42.gemm")).unwrap();
    let layers: Vec<(&str, Vec<u64>, Vec<u64>)> = ms
        .masks
        .iter()
        .map(|m| {
            (
                m.layer_name.as_str(),
                m.shape.iter().map(|&d| d as u64).collect(),
                m.indices.clone(),
            )
        })
        .collect();
    let refs: Vec<(&str, &[u64], &[u64])> = layers
        .iter()
        .map(|(n, d, i)| (*n, &d[..], &i[..]))
        .collect();
    let records = encode_records(&refs);
    assert_eq!(&bytes[..records.len()], &records[..]);
    assert_eq!(ms.selected_count(), 4);
}

#[test]
fn round_trips_are_bit_exact() {
    for ms in [two_layer_gem(), random_2d()] {
        let bytes = mask_set_to_bytes(&ms).unwrap();
        let back = mask_set_from_bytes(&bytes).unwrap();
        assert_eq!(back, ms);
        assert_eq!(mask_set_to_bytes(&back).unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/m.gemm");
        save_masks(&ms, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }
}

#[test]
fn golden_files_reject_corruption() {
    let mut bytes = std::fs::read(golden("two_layer_gem.gemm")).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 1);
    assert!(mask_set_from_bytes(&bytes).is_err());
    let mut bytes = std::fs::read(golden("two_layer_gem.gemm")).unwrap();
    // second index of layer B: 1 -> 0 breaks strict ascent
    let pos = 20 + (4 + 1 + 4 + 8 + 8) + (4 + 1 + 4 + 8 + 8) + 8;
    bytes[pos] = 0;
    assert!(mask_set_from_bytes(&bytes).is_err());
}
