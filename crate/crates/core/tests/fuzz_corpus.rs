//! Replays the checked-in fuzz corpus, plus seeded byte mutations of it,
//! through the same invariants the fuzz targets assert.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedadc::data::LabeledDataset;
use fedadc::engine::{ExperimentConfig, RunSummary};

const MUTATIONS: usize = 300;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus for {target}");
    files.into_iter().map(|p| fs::read(p).unwrap()).collect()
}

fn mutants(seeds: &[Vec<u8>], salt: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let mut out = seeds.to_vec();
    for _ in 0..MUTATIONS {
        let mut m = seeds[rng.random_range(0..seeds.len())].clone();
        for _ in 0..rng.random_range(1..4) {
            match rng.random_range(0..3) {
                0 if !m.is_empty() => {
                    let i = rng.random_range(0..m.len());
                    m[i] = rng.random();
                }
                1 if !m.is_empty() => {
                    let cut = rng.random_range(0..m.len());
                    m.truncate(cut);
                }
                _ => {
                    let i = rng.random_range(0..=m.len());
                    m.insert(i, rng.random());
                }
            }
        }
        out.push(m);
    }
    out
}

#[test]
fn config_parse_corpus() {
    let mut accepted = 0;
    for input in mutants(&corpus("config_parse"), 1) {
        let Ok(text) = std::str::from_utf8(&input) else {
            continue;
        };
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            accepted += 1;
            assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
    assert!(accepted > 0);
}

#[test]
fn dataset_decode_corpus() {
    let mut accepted = 0;
    for input in mutants(&corpus("dataset_decode"), 2) {
        if let Ok(ds) = LabeledDataset::decode(&input) {
            accepted += 1;
            assert_eq!(ds.encode(), input);
        }
    }
    assert!(accepted > 0);
}

#[test]
fn summary_parse_corpus() {
    let mut accepted = 0;
    for input in mutants(&corpus("summary_parse"), 3) {
        let Ok(text) = std::str::from_utf8(&input) else {
            continue;
        };
        if let Ok(summary) = RunSummary::parse(text) {
            accepted += 1;
            let _ = summary.resolved_config();
        }
    }
    assert!(accepted > 0);
}
