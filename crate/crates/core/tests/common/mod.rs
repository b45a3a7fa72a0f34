//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scores every candidate, sorts by descending inner product then ascending
/// id, and keeps the first `k` ids.
pub fn brute_force_top_k(query: &[f64], pool: &[(usize, Vec<f64>)], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .map(|(id, e)| (query.iter().zip(e).map(|(a, b)| a * b).sum::<f64>(), *id))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Small-integer embeddings: inner products are exact, so ties are real and frequent.
pub fn tied_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect()
}

/// Distinct shuffled ids so pool order and id order disagree.
pub fn shuffled_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = (0..n).map(|i| i * 7 + 3).collect();
    ids.shuffle(rng);
    ids
}

/// A config small enough for finite-difference checks over whole models.
pub fn tiny_config() -> hrgen::Config {
    let mut cfg = hrgen::Config::default();
    cfg.model.features = 3;
    cfg.model.patch_hidden = 2;
    cfg.model.text_hidden = 2;
    cfg.model.attention_hidden = 2;
    cfg.model.decoder_hidden = 3;
    cfg.model.max_report_tokens = 8;
    cfg.model.max_sentence_tokens = 6;
    cfg
}

pub fn world() -> hrgen::corpus::SyntheticWorld {
    hrgen::corpus::SyntheticWorld::new(hrgen::corpus::WorldConfig::default()).unwrap()
}

/// Shrinks every trainable tensor towards zero so tanh and sigmoid units
/// stay in their smooth range during finite differences.
pub fn damp(store: &mut hrgen::numerics::ParameterStore, factor: f64) {
    for (_, t) in store.iter_mut() {
        if t.requires_grad() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}
