//! The cache format seen from the outside: files written by another producer
//! (for example a feature extractor) must load through `load_cache`.

use std::fs;

use ueo_core::datamodel::{load_cache, save_cache, EmbeddingCache};

fn emb1_bytes(rows: &[[f32; 3]], labels: &[i32]) -> Vec<u8> {
    let mut out = b"EMB1".to_vec();
    for v in [1u32, rows.len() as u32, 3] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in rows {
        for x in r {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

#[test]
fn externally_written_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("photos.emb");
    let rows = [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8], [0.0, 0.0, 1.0]];
    fs::write(&path, emb1_bytes(&rows, &[2, 0, 1])).unwrap();
    fs::write(
        dir.path().join("photos.meta.json"),
        r#"{"class_names":["cat","dog","bird"],"source":"extractor:rn50","normalized":true}"#,
    )
    .unwrap();
    let cache = load_cache(&path).unwrap();
    assert_eq!((cache.n(), cache.d()), (3, 3));
    assert_eq!(cache.labels(), &[2, 0, 1]);
    assert_eq!(cache.class_names(), &["cat", "dog", "bird"]);
    assert_eq!(cache.source(), "extractor:rn50");
    assert!(cache.normalized());
    assert_eq!(cache.row(1), &[0.0, 0.6, 0.8]);
}

#[test]
fn text_prototype_cache_labels_rows_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("names.emb");
    let rows = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    fs::write(&path, emb1_bytes(&rows, &[0, 1])).unwrap();
    let cache = load_cache(&path).unwrap();
    assert_eq!(cache.labels(), &[0, 1]);
    assert_eq!(cache.class_names(), &["class_0", "class_1"]);
}

#[test]
fn saved_file_matches_hand_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.emb");
    let cache = EmbeddingCache::new(
        3,
        vec![1.0, 0.0, 0.0, 0.0, 0.6, 0.8],
        vec![1, 0],
        vec!["a".into(), "b".into()],
    )
    .unwrap();
    save_cache(&path, &cache).unwrap();
    let rows = [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
    assert_eq!(fs::read(&path).unwrap(), emb1_bytes(&rows, &[1, 0]));
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.emb");
    let good = emb1_bytes(&[[1.0, 0.0, 0.0]], &[0]);
    let cases: Vec<(Vec<u8>, &str)> = vec![
        (good[..good.len() - 1].to_vec(), "truncated"),
        ([good.clone(), vec![0]].concat(), "trailing"),
        ([b"EMB2".as_slice(), &good[4..]].concat(), "magic"),
        (emb1_bytes(&[[f32::NAN, 0.0, 0.0]], &[0]), "features"),
        (emb1_bytes(&[[1.0, 0.0, 0.0]], &[-1]), "labels"),
    ];
    for (bytes, needle) in cases {
        fs::write(&path, bytes).unwrap();
        let err = load_cache(&path).unwrap_err().to_string();
        assert!(err.contains(needle), "{needle}: {err}");
    }
}
