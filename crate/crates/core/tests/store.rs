mod common;

use proptest::prelude::*;
use refineir::store::{l2_norm, read_corpus};
use refineir::{generate_corpus, load_corpus, Corpus, Error, SyntheticSpec};

fn round_trip(c: &Corpus) -> Corpus {
    let mut buf = Vec::new();
    c.write_to(&mut buf).unwrap();
    read_corpus(buf.as_slice()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn serialize_round_trip_is_identity(seed in any::<u64>(), n in 0usize..40, dim in 1usize..12) {
        let c = common::random_corpus(seed, n, dim);
        let back = round_trip(&c);
        prop_assert_eq!(back.header(), c.header());
        prop_assert_eq!(back.records(), c.records());
        prop_assert_eq!(back.median_norm(), c.median_norm());
    }

    #[test]
    fn synthetic_round_trip_keeps_lineage(seed in any::<u64>()) {
        let spec = SyntheticSpec { dimension: 8, n_full_images: 5, n_concepts: 3, seed, ..Default::default() };
        let c = generate_corpus(&spec).unwrap().corpus;
        let back = round_trip(&c);
        prop_assert_eq!(back.records(), c.records());
    }

    #[test]
    fn median_norm_matches_naive_sort(seed in any::<u64>(), n in 1usize..300) {
        let c = common::random_corpus(seed, n, 4);
        let mut norms: Vec<f64> = c.records().iter().map(|r| l2_norm(&r.embedding)).collect();
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = if n % 2 == 1 { norms[n / 2] } else { (norms[n / 2 - 1] + norms[n / 2]) / 2.0 };
        prop_assert_eq!(c.median_norm(), Some(want));
        prop_assert!(want > 0.0);
    }
}

#[test]
fn median_on_ten_thousand_records() {
    let c = common::random_corpus(99, 10_000, 3);
    let mut norms: Vec<f64> = c.records().iter().map(|r| l2_norm(&r.embedding)).collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(c.median_norm(), Some((norms[4999] + norms[5000]) / 2.0));
}

#[test]
fn load_from_disk_and_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    std::fs::write(
        &path,
        concat!(
            "{\"dimension\": 2, \"categories\": [\"grade1\", \"grade3\"], \"concepts\": [\"fused_glands\"]}\n",
            "{\"id\": \"img_001\", \"tier\": \"FULL\", \"size\": {\"width\": 300, \"height\": 300}, \"diagnosis\": \"grade3\", \"concept_labels\": {\"fused_glands\": true}, \"embedding\": [0.5, -1.25]}\n",
            "{\"id\": \"img_001_q0\", \"tier\": \"QUARTER\", \"parent_id\": \"img_001\", \"region\": {\"x\": 0, \"y\": 0, \"width\": 150, \"height\": 150}, \"diagnosis\": \"grade3\", \"embedding\": [0.25, -1.0]}\n",
        ),
    )
    .unwrap();
    let c = load_corpus(&path).unwrap();
    let r = c.get_record("img_001").unwrap();
    assert_eq!(r.embedding, vec![0.5, -1.25]);
    assert!(r.has_concept("fused_glands"));
    assert_eq!(
        c.get_record("img_001_q0").unwrap().parent_id.as_deref(),
        Some("img_001")
    );
    assert!(matches!(c.get_record("missing"), Err(Error::NotFound(_))));

    let out = dir.path().join("again.jsonl");
    c.save(&out).unwrap();
    assert_eq!(load_corpus(&out).unwrap().records(), c.records());
}

#[test]
fn missing_file_is_io_error() {
    let err = load_corpus("/nonexistent/corpus.jsonl").unwrap_err();
    assert!(!err.is_data_error());
}
