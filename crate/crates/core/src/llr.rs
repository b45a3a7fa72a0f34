//! Language-language retrieval: sentence matching, per-subject candidate
//! sentence pools and the sentence template.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_query_attention, query_set, stack_values, MultiQueryOutput};
use crate::config::{Config, StageConfig};
use crate::corpus::{CorpusSample, KeywordDictionary, Vocabulary};
use crate::encoders::{encode_text, init_text_encoder, TextEncoderDims};
use crate::error::{Error, Result};
use crate::numerics::layers::linear_layer;
use crate::numerics::{clip_and_step, dot, sigmoid, AdamState, Graph, NodeId, ParameterStore};
use crate::retrieval::{PoolEntry, RetrievalPool};
use crate::seed::rng_for;
use crate::vlr::{extract_keywords, RetrievedReport, VlrModel, EMBED};

const SENT: &str = "llr.sent";

/// Sentence slots reserved per report when forming sentence ids.
pub const SENTENCES_PER_REPORT: usize = 64;

pub fn sentence_id(report_id: usize, index: usize) -> usize {
    report_id * SENTENCES_PER_REPORT + index
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlrModel {
    pub store: ParameterStore,
    pub dims: TextEncoderDims,
}

/// `p_ll = sigmoid(s_iᵀ s_j)`.
pub fn sentence_match(a: &[f64], b: &[f64]) -> f64 {
    sigmoid(dot(a, b))
}

#[derive(Clone, Copy, Debug)]
pub struct SentencePair<'a> {
    pub a: &'a [usize],
    pub b: &'a [usize],
    pub same_report: bool,
}

fn dims_from(cfg: &Config) -> TextEncoderDims {
    TextEncoderDims {
        embed: cfg.model.features,
        hidden: cfg.model.text_hidden,
        output: cfg.model.features,
        max_tokens: cfg.model.max_sentence_tokens,
    }
}

impl LlrModel {
    /// The sentence encoder reads the VLR embedding table, so only the
    /// recurrent and projection weights live here.
    pub fn new<R: Rng>(cfg: &Config, rng: &mut R) -> Result<Self> {
        let dims = dims_from(cfg);
        let mut store = ParameterStore::new();
        init_text_encoder(&mut store, SENT, dims, rng)?;
        Ok(Self { store, dims })
    }

    pub fn from_store(store: ParameterStore, cfg: &Config) -> Result<Self> {
        store.tensor(&format!("{SENT}.proj.w"))?;
        Ok(Self {
            store,
            dims: dims_from(cfg),
        })
    }

    /// `embedding` must be a node holding the (frozen) shared table.
    pub fn sentence_embedding(&self, g: &mut Graph, embedding: NodeId, tokens: &[usize]) -> Result<NodeId> {
        encode_text(g, &self.store, embedding, SENT, tokens, self.dims)
    }

    pub fn embed_sentence(&self, vlr: &VlrModel, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let table = g.frozen_param(&vlr.store, EMBED)?;
        let s = self.sentence_embedding(&mut g, table, tokens)?;
        Ok(g.data(s).to_vec())
    }

    pub fn pretrain_loss(&self, g: &mut Graph, vlr: &VlrModel, batch: &[SentencePair]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Validation("empty LLR batch".into()));
        }
        let table = g.frozen_param(&vlr.store, EMBED)?;
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for p in batch {
            let a = self.sentence_embedding(g, table, p.a)?;
            let b = self.sentence_embedding(g, table, p.b)?;
            let s = g.dot(a, b)?;
            logits.push(g.reshape(s, &[1])?);
            targets.push(if p.same_report { 1.0 } else { 0.0 });
        }
        let all = g.concat(&logits, 0)?;
        g.bce_with_logits(all, &targets)
    }

    pub fn pretrain_step(&mut self, vlr: &VlrModel, batch: &[SentencePair], adam: &mut AdamState, clip: f64) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.pretrain_loss(&mut g, vlr, batch)?;
        g.backward(loss, &mut self.store)?;
        clip_and_step(&mut self.store, adam, clip)?;
        Ok(g.value(loss).item())
    }
}

/// Draws `count` pairs, alternating positives (two distinct sentences of
/// one report) and negatives (sentences of two different reports). Pairs
/// are unordered. Returns `(report, sentence)` index pairs and the target.
pub fn sample_pairs<R: Rng>(
    reports: &[Vec<Vec<usize>>],
    count: usize,
    rng: &mut R,
) -> Result<Vec<((usize, usize), (usize, usize), bool)>> {
    let multi: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].len() >= 2).collect();
    if multi.is_empty() || reports.len() < 2 {
        return Err(Error::Validation(
            "sentence pairs need two reports and one report with two sentences".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        if k % 2 == 0 {
            let r = *multi.choose(rng).expect("non-empty");
            let n = reports[r].len();
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            pairs.push(((r, i), (r, j), true));
        } else {
            let a = rng.random_range(0..reports.len());
            let b = (a + rng.random_range(1..reports.len())) % reports.len();
            let i = rng.random_range(0..reports[a].len());
            let j = rng.random_range(0..reports[b].len());
            pairs.push(((a, i), (b, j), false));
        }
    }
    Ok(pairs)
}

fn encode_sentences(samples: &[&CorpusSample], vocab: &Vocabulary) -> Vec<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|s| s.sentences.iter().filter(|t| !t.is_empty()).map(|t| vocab.encode(t)).collect())
        .collect()
}

/// Pretrains for `stage.epochs`, drawing `pairs` fresh pairs each epoch.
/// A fixed pair set overfits the template sentences. Returns the mean loss
/// per epoch.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    model: &mut LlrModel,
    vlr: &VlrModel,
    train: &[&CorpusSample],
    vocab: &Vocabulary,
    stage: &StageConfig,
    adam: &mut AdamState,
    pairs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let reports = encode_sentences(train, vocab);
    let mut rng = rng_for(seed, "llr/pairs");
    let count = pairs;
    let mut history = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        adam.config.lr = stage.schedule.lr(epoch, stage.lr);
        let pairs = sample_pairs(&reports, count, &mut rng)?;
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in pairs.chunks(stage.batch_size) {
            let batch: Vec<SentencePair> = chunk
                .iter()
                .map(|&((a, i), (b, j), same)| SentencePair {
                    a: &reports[a][i],
                    b: &reports[b][j],
                    same_report: same,
                })
                .collect();
            total += model.pretrain_step(vlr, &batch, adam, stage.clip)?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("llr epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}

/// Accuracy of `p_ll > 0.5` on `pairs` balanced held-out pairs.
pub fn evaluate(
    model: &LlrModel,
    vlr: &VlrModel,
    samples: &[&CorpusSample],
    vocab: &Vocabulary,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let reports = encode_sentences(samples, vocab);
    let drawn = sample_pairs(&reports, pairs, &mut rng_for(seed, "llr/eval"))?;
    let mut correct = 0usize;
    for ((a, i), (b, j), same) in &drawn {
        let sa = model.embed_sentence(vlr, &reports[*a][*i])?;
        let sb = model.embed_sentence(vlr, &reports[*b][*j])?;
        correct += usize::from((sentence_match(&sa, &sb) > 0.5) == *same);
    }
    Ok(correct as f64 / drawn.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentencePayload {
    pub report_id: usize,
    pub tokens: Vec<String>,
}

pub type SentencePool = RetrievalPool<SentencePayload>;

fn sentence_entries<'a>(
    model: &LlrModel,
    vlr: &VlrModel,
    vocab: &Vocabulary,
    reports: impl IntoIterator<Item = (usize, &'a [Vec<String>])>,
) -> Result<Vec<PoolEntry<SentencePayload>>> {
    let mut entries = Vec::new();
    for (report_id, sentences) in reports {
        if sentences.len() > SENTENCES_PER_REPORT {
            return Err(Error::Validation(format!(
                "report {report_id} has more than {SENTENCES_PER_REPORT} sentences"
            )));
        }
        for (j, tokens) in sentences.iter().enumerate().filter(|(_, t)| !t.is_empty()) {
            entries.push(PoolEntry {
                id: sentence_id(report_id, j),
                embedding: model.embed_sentence(vlr, &vocab.encode(tokens))?,
                payload: SentencePayload {
                    report_id,
                    tokens: tokens.clone(),
                },
            });
        }
    }
    entries.sort_by_key(|e| e.id);
    Ok(entries)
}

/// Splits the retrieved reports into their sentences and embeds each one.
pub fn build_sentence_pool(
    model: &LlrModel,
    vlr: &VlrModel,
    vocab: &Vocabulary,
    retrieved: &[RetrievedReport],
) -> Result<SentencePool> {
    if retrieved.is_empty() {
        return Err(Error::Validation("sentence pool needs at least one retrieved report".into()));
    }
    RetrievalPool::new(sentence_entries(
        model,
        vlr,
        vocab,
        retrieved.iter().map(|r| (r.id, r.sentences.as_slice())),
    )?)
}

/// Every training sentence; also the source of per-subject pools via [`restrict_pool`].
pub fn build_all_sentences_pool(
    model: &LlrModel,
    vlr: &VlrModel,
    vocab: &Vocabulary,
    train: &[&CorpusSample],
) -> Result<SentencePool> {
    if train.is_empty() {
        return Err(Error::Validation("cannot build a sentence pool from an empty corpus".into()));
    }
    RetrievalPool::new(sentence_entries(
        model,
        vlr,
        vocab,
        train.iter().map(|s| (s.id, s.sentences.as_slice())),
    )?)
}

/// The sub-pool of `all` whose sentences come from `retrieved`. Equal to
/// [`build_sentence_pool`] whenever every retrieved report is in `all`,
/// without re-encoding.
pub fn restrict_pool(all: &SentencePool, retrieved: &[RetrievedReport]) -> Result<SentencePool> {
    if retrieved.is_empty() {
        return Err(Error::Validation("sentence pool needs at least one retrieved report".into()));
    }
    let entries: Vec<PoolEntry<SentencePayload>> = all
        .entries()
        .iter()
        .filter(|e| retrieved.iter().any(|r| r.id == e.payload.report_id))
        .cloned()
        .collect();
    RetrievalPool::new(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSentence {
    pub id: usize,
    pub report_id: usize,
    pub score: f64,
    pub embedding: Vec<f64>,
    pub tokens: Vec<String>,
}

/// Exact top-`k_s` sentences for query embedding `o`. A `k` above the pool
/// size is clamped with a warning.
pub fn retrieve_sentences(o: &[f64], pool: &SentencePool, k: usize) -> Result<Vec<RetrievedSentence>> {
    let k = if k > pool.len() {
        log::warn!("k_s = {k} exceeds the {} candidate sentences; using all", pool.len());
        pool.len()
    } else {
        k
    };
    Ok(pool
        .top_k(o, k, None)?
        .into_iter()
        .map(|h| {
            let e = pool.entry(h.index);
            RetrievedSentence {
                id: h.id,
                report_id: e.payload.report_id,
                score: h.score,
                embedding: e.embedding.clone(),
                tokens: e.payload.tokens.clone(),
            }
        })
        .collect())
}

pub fn sentence_keywords(retrieved: &[RetrievedSentence], dictionary: &KeywordDictionary, n: usize) -> Vec<String> {
    extract_keywords(retrieved.iter().flat_map(|s| s.tokens.iter()), dictionary, n)
}

/// `u`: the hidden state, projected to `d` by `{anchor_prefix}`, anchors the
/// keys while keyword and disease queries attend over the retrieved sentences.
#[allow(clippy::too_many_arguments)]
pub fn sentence_template(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    anchor_prefix: &str,
    hidden: NodeId,
    retrieved: &[Vec<f64>],
    keywords: &[Vec<f64>],
    n: usize,
    diseases: NodeId,
) -> Result<MultiQueryOutput> {
    let anchor = linear_layer(g, store, anchor_prefix, hidden)?;
    let values = stack_values(g, retrieved)?;
    let queries = query_set(g, keywords, n, diseases)?;
    multi_query_attention(g, store, prefix, queries, anchor, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceTrace {
    pub query: Vec<String>,
    pub sentence_ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SentenceTrace {
    pub fn new(query: &[String], retrieved: &[RetrievedSentence]) -> Self {
        Self {
            query: query.to_vec(),
            sentence_ids: retrieved.iter().map(|s| s.id).collect(),
            scores: retrieved.iter().map(|s| s.score).collect(),
        }
    }
}
