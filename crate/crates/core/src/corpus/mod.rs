//! Synthetic corpus, vocabulary, keyword dictionary and deterministic splits.

mod vocab;
mod world;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use vocab::{build_keyword_dictionary, build_vocab, KeywordDictionary, Vocabulary, END, PAD, START, UNK};
pub use world::{generate_corpus, Side, SubjectTraits, SyntheticWorld, WorldConfig};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// One subject: `b` image views, a report as a sentence list, disease labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub id: usize,
    /// Each view is a row-major `grid × grid` image.
    pub views: Vec<Vec<f64>>,
    pub sentences: Vec<Vec<String>>,
    /// Active class indices, ascending.
    pub labels: Vec<usize>,
}

impl CorpusSample {
    pub fn report_tokens(&self) -> Vec<String> {
        self.sentences.iter().flatten().cloned().collect()
    }

    pub fn multi_hot(&self, classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; classes];
        for &c in &self.labels {
            v[c] = 1.0;
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of sample ids, then partition by `ratios` (train, val, test).
pub fn split(corpus: &[CorpusSample], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be in [0, 1] and sum to 1, got {ratios:?}"
        )));
    }
    let mut ids: Vec<usize> = corpus.iter().map(|s| s.id).collect();
    ids.shuffle(&mut rng_for(seed, "split"));
    let n = ids.len();
    let n_train = ((tr * n as f64).round() as usize).min(n);
    let n_val = ((va * n as f64).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(Split {
        train: ids,
        val,
        test,
    })
}

/// Looks samples up by id.
pub fn select<'a>(corpus: &'a [CorpusSample], ids: &[usize]) -> Vec<&'a CorpusSample> {
    let index: std::collections::HashMap<usize, &CorpusSample> =
        corpus.iter().map(|s| (s.id, s)).collect();
    ids.iter().filter_map(|id| index.get(id).copied()).collect()
}

pub fn write_corpus(path: &Path, corpus: &[CorpusSample]) -> Result<()> {
    write_jsonl(path, corpus)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusSample>> {
    read_jsonl(path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
