//! Visual-language retrieval: disease head, image-report matching, the
//! training-report pool, keyword extraction and the report template.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_spatial, fuse_views, grid_of, init_fusion, init_spatial_attention, multi_query_attention,
    query_set, spatial_scores, stack_values, MultiQueryOutput,
};
use crate::config::{Config, StageConfig};
use crate::corpus::{CorpusSample, KeywordDictionary, Vocabulary};
use crate::encoders::{
    encode_image, encode_text, init_embedding, init_image_encoder, init_text_encoder, ImageEncoderDims,
    TextEncoderDims,
};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::numerics::layers::{init_linear, linear_layer};
use crate::numerics::{
    clip_and_step, sigmoid, AdamConfig, AdamState, Graph, NodeId, ParameterStore, Tensor,
};
use crate::retrieval::{PoolEntry, RetrievalPool};
use crate::seed::rng_for;

/// Token embedding table shared by the report and sentence encoders.
pub const EMBED: &str = "vlr.embed";
const IMG: &str = "vlr.img";
const REPORT: &str = "vlr.report";
const CLS: &str = "vlr.cls";
const ATT: &str = "vlr.att";
const FUSE: &str = "vlr.fuse.w";

/// Parameter prefixes trained at the image learning rate.
const IMAGE_GROUPS: [&str; 4] = [IMG, CLS, ATT, "vlr.fuse"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VlrDims {
    pub image: ImageEncoderDims,
    pub report: TextEncoderDims,
    pub classes: usize,
    pub views: usize,
    pub attention_hidden: usize,
}

impl VlrDims {
    pub fn from_config(cfg: &Config) -> Self {
        let m = &cfg.model;
        let w = &cfg.corpus.world;
        Self {
            image: ImageEncoderDims {
                grid: w.grid,
                cells: w.cells,
                hidden: m.patch_hidden,
                features: m.features,
            },
            report: TextEncoderDims {
                embed: m.features,
                hidden: m.text_hidden,
                output: m.features,
                max_tokens: m.max_report_tokens,
            },
            classes: w.classes,
            views: w.views,
            attention_hidden: m.attention_hidden,
        }
    }

    pub fn features(&self) -> usize {
        self.image.features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VlrModel {
    pub store: ParameterStore,
    pub dims: VlrDims,
}

/// Frozen per-subject quantities read by the later stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEncoding {
    /// One `[k, k, d]` map per view.
    pub maps: Vec<Tensor>,
    /// Disease logits `c_pred`.
    pub c_pred: Vec<f64>,
    /// Fused image vector `v`.
    pub v: Vec<f64>,
    /// Spatial attention per view.
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl SubjectEncoding {
    pub fn disease_probabilities(&self) -> Vec<f64> {
        self.c_pred.iter().map(|&x| sigmoid(x)).collect()
    }
}

/// `c_pred = W_cls · Σ_i AvgPool(v_i) + b_cls`.
pub fn disease_logits(g: &mut Graph, store: &ParameterStore, prefix: &str, maps: &[NodeId]) -> Result<NodeId> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::Validation("disease head needs at least one view".into()))?;
    let mut pooled = g.avg_pool_spatial(*first)?;
    for &m in rest {
        let p = g.avg_pool_spatial(m)?;
        pooled = g.add(pooled, p)?;
    }
    linear_layer(g, store, prefix, pooled)
}

/// `p_vl = sigmoid(rᵀ v)`.
pub fn match_score(v: &[f64], r: &[f64]) -> f64 {
    sigmoid(crate::numerics::dot(r, v))
}

/// Indices of the `m` largest logits, ties by class index.
pub fn top_diseases(c_pred: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..c_pred.len()).collect();
    idx.sort_by(|&a, &b| c_pred[b].total_cmp(&c_pred[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// One pretraining pair. `matched` is false when `report` belongs to another subject.
#[derive(Clone, Debug)]
pub struct VlrExample<'a> {
    pub views: &'a [Vec<f64>],
    pub report: &'a [usize],
    pub labels: Vec<f64>,
    pub matched: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlrLosses {
    pub disease: f64,
    pub matching: f64,
}

impl VlrModel {
    pub fn new<R: Rng>(cfg: &Config, vocab: usize, rng: &mut R) -> Result<Self> {
        let dims = VlrDims::from_config(cfg);
        let d = dims.features();
        let mut store = ParameterStore::new();
        init_embedding(&mut store, EMBED, vocab, d, rng)?;
        init_image_encoder(&mut store, IMG, dims.image, rng)?;
        init_text_encoder(&mut store, REPORT, dims.report, rng)?;
        init_linear(&mut store, CLS, d, dims.classes, rng)?;
        init_spatial_attention(&mut store, ATT, d, dims.classes, dims.attention_hidden, rng)?;
        init_fusion(&mut store, FUSE, dims.views, d, rng)?;
        Ok(Self { store, dims })
    }

    pub fn from_store(store: ParameterStore, cfg: &Config) -> Result<Self> {
        let dims = VlrDims::from_config(cfg);
        let embed = store.tensor(EMBED)?;
        if embed.shape()[1] != dims.features() {
            return Err(Error::dim("vlr embedding", embed.shape(), &[embed.shape()[0], dims.features()]));
        }
        Ok(Self { store, dims })
    }

    pub fn vocab_size(&self) -> usize {
        self.store.get(EMBED).map_or(0, |t| t.shape()[0])
    }

    pub fn image_maps(&self, g: &mut Graph, views: &[Vec<f64>]) -> Result<Vec<NodeId>> {
        if views.len() != self.dims.views {
            return Err(Error::Validation(format!(
                "expected {} views, got {}",
                self.dims.views,
                views.len()
            )));
        }
        views
            .iter()
            .map(|v| encode_image(g, &self.store, IMG, v, self.dims.image))
            .collect()
    }

    pub fn disease_logits(&self, g: &mut Graph, maps: &[NodeId]) -> Result<NodeId> {
        disease_logits(g, &self.store, CLS, maps)
    }

    /// Attends each view conditioned on `c_pred`, then fuses: returns `v`
    /// and the per-view attention weights.
    pub fn image_vector(&self, g: &mut Graph, maps: &[NodeId], c_pred: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut attended = Vec::with_capacity(maps.len());
        let mut weights = Vec::with_capacity(maps.len());
        for &m in maps {
            let att = spatial_scores(g, &self.store, ATT, m, c_pred)?;
            attended.push(attend_spatial(g, m, att.weights)?);
            weights.push(att.weights);
        }
        Ok((fuse_views(g, &self.store, FUSE, &attended)?, weights))
    }

    pub fn report_embedding(&self, g: &mut Graph, tokens: &[usize]) -> Result<NodeId> {
        let embed = g.param(&self.store, EMBED)?;
        encode_text(g, &self.store, embed, REPORT, tokens, self.dims.report)
    }

    /// Mean disease BCE and mean matching BCE over the batch.
    pub fn pretrain_losses(&self, g: &mut Graph, batch: &[VlrExample]) -> Result<(NodeId, NodeId)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty VLR batch".into()));
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut matches = Vec::with_capacity(batch.len());
        let mut labels = Vec::new();
        let mut targets = Vec::with_capacity(batch.len());
        for ex in batch {
            let maps = self.image_maps(g, ex.views)?;
            let c_pred = self.disease_logits(g, &maps)?;
            let (v, _) = self.image_vector(g, &maps, c_pred)?;
            let r = self.report_embedding(g, ex.report)?;
            let s = g.dot(r, v)?;
            logits.push(c_pred);
            matches.push(g.reshape(s, &[1])?);
            labels.extend_from_slice(&ex.labels);
            targets.push(if ex.matched { 1.0 } else { 0.0 });
        }
        let all_logits = g.concat(&logits, 0)?;
        let all_matches = g.concat(&matches, 0)?;
        let dc = g.bce_with_logits(all_logits, &labels)?;
        let vl = g.bce_with_logits(all_matches, &targets)?;
        Ok((dc, vl))
    }

    /// One optimizer step on `loss_dc + loss_vl`.
    pub fn pretrain_step(&mut self, batch: &[VlrExample], adam: &mut AdamState, clip: f64) -> Result<VlrLosses> {
        let mut g = Graph::new();
        let (dc, vl) = self.pretrain_losses(&mut g, batch)?;
        let total = g.add(dc, vl)?;
        g.backward(total, &mut self.store)?;
        clip_and_step(&mut self.store, adam, clip)?;
        Ok(VlrLosses {
            disease: g.value(dc).item(),
            matching: g.value(vl).item(),
        })
    }

    pub fn encode_subject(&self, views: &[Vec<f64>]) -> Result<SubjectEncoding> {
        let mut g = Graph::new();
        let maps = self.image_maps(&mut g, views)?;
        let c_pred = self.disease_logits(&mut g, &maps)?;
        let (v, weights) = self.image_vector(&mut g, &maps, c_pred)?;
        let d = self.dims.features();
        let k = self.dims.image.cells;
        Ok(SubjectEncoding {
            maps: maps
                .iter()
                .map(|&m| Tensor::new(&[k, k, d], g.data(m).to_vec()))
                .collect::<Result<_>>()?,
            c_pred: g.data(c_pred).to_vec(),
            v: g.data(v).to_vec(),
            attention: weights.iter().map(|&w| grid_of(&g, w)).collect(),
        })
    }

    pub fn embed_report(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let r = self.report_embedding(&mut g, tokens)?;
        Ok(g.data(r).to_vec())
    }

    /// Rows of the shared embedding table for `words`, in order.
    pub fn word_embeddings(&self, vocab: &Vocabulary, words: &[String]) -> Result<Vec<Vec<f64>>> {
        let table = self.store.tensor(EMBED)?;
        Ok(words.iter().map(|w| table.row(vocab.encode_token(w)).to_vec()).collect())
    }

    /// Sets the per-group learning rates for `epoch`.
    pub fn apply_schedule(adam: &mut AdamState, stage: &StageConfig, epoch: usize) {
        let lang = stage.schedule.lr(epoch, stage.lr);
        let image = stage.schedule.lr(epoch, stage.image_lr.unwrap_or(stage.lr));
        adam.config.lr = lang;
        for p in IMAGE_GROUPS {
            adam.set_group_lr(p, image);
        }
    }
}

pub fn stage_optimizer(stage: &StageConfig) -> AdamState {
    AdamState::new(AdamConfig {
        lr: stage.lr,
        beta1: stage.beta1,
        beta2: stage.beta2,
        eps: 1e-8,
        weight_decay: stage.weight_decay,
    })
}

/// Report tokens mapped through the vocabulary, out-of-vocabulary to UNK.
pub fn encode_report(sample: &CorpusSample, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(&sample.report_tokens())
}

/// Pairs each sample with its own report or, for half of the batch, with
/// the report of another uniformly chosen batch member.
pub fn make_batch<'a, R: Rng>(
    samples: &[&'a CorpusSample],
    reports: &[&'a [usize]],
    classes: usize,
    rng: &mut R,
) -> Vec<VlrExample<'a>> {
    let n = samples.len();
    let mut flags: Vec<bool> = (0..n).map(|i| i < n.div_ceil(2)).collect();
    flags.shuffle(rng);
    (0..n)
        .map(|i| {
            let matched = flags[i] || n == 1;
            let j = if matched {
                i
            } else {
                let k = rng.random_range(0..n - 1);
                if k >= i { k + 1 } else { k }
            };
            VlrExample {
                views: &samples[i].views,
                report: reports[j],
                labels: samples[i].multi_hot(classes),
                matched,
            }
        })
        .collect()
}

/// Runs `stage.epochs` of pretraining; returns mean losses per epoch.
pub fn pretrain(
    model: &mut VlrModel,
    train: &[&CorpusSample],
    vocab: &Vocabulary,
    stage: &StageConfig,
    adam: &mut AdamState,
    seed: u64,
) -> Result<Vec<VlrLosses>> {
    let reports: Vec<Vec<usize>> = train.iter().map(|s| encode_report(s, vocab)).collect();
    let mut rng = rng_for(seed, "vlr/batches");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        VlrModel::apply_schedule(adam, stage, epoch);
        order.shuffle(&mut rng);
        let (mut dc, mut vl, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(stage.batch_size) {
            let samples: Vec<&CorpusSample> = chunk.iter().map(|&i| train[i]).collect();
            let reps: Vec<&[usize]> = chunk.iter().map(|&i| reports[i].as_slice()).collect();
            let batch = make_batch(&samples, &reps, model.dims.classes, &mut rng);
            let l = model.pretrain_step(&batch, adam, stage.clip)?;
            dc += l.disease;
            vl += l.matching;
            batches += 1;
        }
        let losses = VlrLosses {
            disease: dc / batches as f64,
            matching: vl / batches as f64,
        };
        log::info!(
            "vlr epoch {epoch}: disease {:.4} matching {:.4}",
            losses.disease,
            losses.matching
        );
        history.push(losses);
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlrEvaluation {
    /// Accuracy of `p_vl > 0.5` over one matched and one mismatched pair per subject.
    pub match_accuracy: f64,
    /// Mean per-class AUC over classes with both outcomes present.
    pub disease_auc: f64,
}

/// Held-out matching accuracy and disease AUC. Each subject's mismatched
/// report is drawn from another held-out subject.
pub fn evaluate(model: &VlrModel, samples: &[&CorpusSample], vocab: &Vocabulary, seed: u64) -> Result<VlrEvaluation> {
    if samples.len() < 2 {
        return Err(Error::Validation("VLR evaluation needs at least two samples".into()));
    }
    let mut rng = rng_for(seed, "vlr/eval");
    let classes = model.dims.classes;
    let reports: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| model.embed_report(&encode_report(s, vocab)))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    let mut scores = vec![Vec::with_capacity(samples.len()); classes];
    let mut labels = vec![Vec::with_capacity(samples.len()); classes];
    for (i, s) in samples.iter().enumerate() {
        let enc = model.encode_subject(&s.views)?;
        let k = rng.random_range(0..samples.len() - 1);
        let j = if k >= i { k + 1 } else { k };
        correct += usize::from(match_score(&enc.v, &reports[i]) > 0.5);
        correct += usize::from(match_score(&enc.v, &reports[j]) <= 0.5);
        let hot = s.multi_hot(classes);
        for c in 0..classes {
            scores[c].push(enc.c_pred[c]);
            labels[c].push(hot[c] > 0.5);
        }
    }
    let aucs: Vec<f64> = (0..classes).filter_map(|c| auc(&scores[c], &labels[c])).collect();
    if aucs.is_empty() {
        return Err(Error::Validation("no class has both outcomes in the evaluation set".into()));
    }
    Ok(VlrEvaluation {
        match_accuracy: correct as f64 / (2 * samples.len()) as f64,
        disease_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
    })
}

/// Training reports keyed by id, payload the report's sentences.
pub type ReportPool = RetrievalPool<Vec<Vec<String>>>;

/// One entry per training report, ordered by id.
pub fn build_report_pool(model: &VlrModel, train: &[&CorpusSample], vocab: &Vocabulary) -> Result<ReportPool> {
    if train.is_empty() {
        return Err(Error::Validation("cannot build a report pool from an empty corpus".into()));
    }
    let mut sorted: Vec<&CorpusSample> = train.to_vec();
    sorted.sort_by_key(|s| s.id);
    let entries = sorted
        .iter()
        .map(|s| {
            Ok(PoolEntry {
                id: s.id,
                embedding: model.embed_report(&encode_report(s, vocab))?,
                payload: s.sentences.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalPool::new(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedReport {
    pub id: usize,
    pub score: f64,
    pub embedding: Vec<f64>,
    pub sentences: Vec<Vec<String>>,
}

/// Exact top-`k_r` reports for image vector `v`, optionally skipping the
/// subject's own report.
pub fn retrieve_reports(v: &[f64], pool: &ReportPool, k: usize, exclude: Option<usize>) -> Result<Vec<RetrievedReport>> {
    Ok(pool
        .top_k(v, k, exclude)?
        .into_iter()
        .map(|h| {
            let e = pool.entry(h.index);
            RetrievedReport {
                id: h.id,
                score: h.score,
                embedding: e.embedding.clone(),
                sentences: e.payload.clone(),
            }
        })
        .collect())
}

/// The `n` dictionary words with the most case-insensitive hits among
/// `tokens`, ties in dictionary order. Words without hits are never returned.
pub fn extract_keywords<'a>(
    tokens: impl IntoIterator<Item = &'a String>,
    dictionary: &KeywordDictionary,
    n: usize,
) -> Vec<String> {
    let mut counts = vec![0usize; dictionary.len()];
    for t in tokens {
        if let Some(p) = dictionary.position(t) {
            counts[p] += 1;
        }
    }
    let mut hits: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
    hits.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    hits.into_iter()
        .take(n)
        .map(|i| dictionary.words()[i].clone())
        .collect()
}

pub fn report_keywords(retrieved: &[RetrievedReport], dictionary: &KeywordDictionary, n: usize) -> Vec<String> {
    extract_keywords(retrieved.iter().flat_map(|r| r.sentences.iter().flatten()), dictionary, n)
}

/// `r_s`: keyword and disease queries attend over the retrieved report
/// embeddings with `v` as the key anchor.
pub fn report_template(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    v: NodeId,
    retrieved: &[Vec<f64>],
    keywords: &[Vec<f64>],
    n: usize,
    diseases: NodeId,
) -> Result<MultiQueryOutput> {
    let values = stack_values(g, retrieved)?;
    let queries = query_set(g, keywords, n, diseases)?;
    multi_query_attention(g, store, prefix, queries, v, values)
}

/// Retrieved ids and scores for one query subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTrace {
    pub sample_id: usize,
    pub report_ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ReportTrace {
    pub fn new(sample_id: usize, retrieved: &[RetrievedReport]) -> Self {
        Self {
            sample_id,
            report_ids: retrieved.iter().map(|r| r.id).collect(),
            scores: retrieved.iter().map(|r| r.score).collect(),
        }
    }
}
