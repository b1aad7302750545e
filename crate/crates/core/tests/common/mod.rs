#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use refineir::{Corpus, CorpusHeader, ImageRecord, Tier};

pub const CATEGORIES: [&str; 3] = ["grade1", "grade2", "grade3"];

/// FULL-only corpus with Gaussian embeddings; some exact duplicates to force ties.
pub fn random_corpus(seed: u64, n: usize, dim: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<ImageRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let embedding = if i > 0 && rng.random_bool(0.05) {
            records[rng.random_range(0..i)].embedding.clone()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        records.push(ImageRecord {
            id: format!("r{:04}", rng.random_range(0..100_000) * 10_000 + i),
            source_uri: format!("file:///tmp/{i}.png"),
            tier: Tier::Full,
            parent_id: None,
            region: None,
            size: None,
            diagnosis: CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_string(),
            concept_labels: Some(BTreeMap::from([("c".to_string(), rng.random_bool(0.3))])),
            oracle_intensities: None,
            embedding,
        });
    }
    let header = CorpusHeader::new(
        dim,
        CATEGORIES.iter().map(|s| s.to_string()).collect(),
        vec!["c".into()],
    );
    Corpus::new(header, records).expect("valid random corpus")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Naive L2 written independently of the engine.
pub fn naive_l2(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    s.sqrt()
}

/// Full sort by (distance, id), truncated to k.
pub fn brute_force(corpus: &Corpus, query: &[f64], tier: Tier, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = corpus
        .records()
        .iter()
        .filter(|r| r.tier == tier)
        .map(|r| (r.id.clone(), naive_l2(query, &r.embedding)))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
