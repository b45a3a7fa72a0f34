//! Hierarchical decoder: a sentence LSTM that plans one topic state per
//! sentence and a word LSTM that writes it, both conditioned on spatial
//! attention over the image maps and on the retrieved templates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_memory, attend_spatial, fuse_views, grid_of, init_fusion, init_multi_query, init_spatial_attention,
    prepare_memory, project_cells, query_set, spatial_scores_projected, stack_values, AttentionDump, QueryMemory,
};
use crate::config::{Config, GenerationConfig, RetrievalConfig};
use crate::corpus::{CorpusSample, KeywordDictionary, Vocabulary, END, START};
use crate::error::{Error, Result};
use crate::llr::{sentence_id, sentence_keywords, LlrModel, RetrievedSentence, SentencePool};
use crate::numerics::layers::{init_linear, init_lstm, linear_layer};
use crate::numerics::{lstm_cell, Graph, LstmDims, LstmState, NodeId, ParameterStore, Tensor};
use crate::retrieval::PoolEntry;
use crate::vlr::{report_keywords, report_template, retrieve_reports, top_diseases, ReportPool, RetrievedReport, SubjectEncoding, VlrModel};

const H0: &str = "dec.h0";
const SENT_ATT: &str = "dec.satt";
const WORD_ATT: &str = "dec.watt";
const SENT_FUSE: &str = "dec.sfuse.w";
const WORD_FUSE: &str = "dec.wfuse.w";
const REPORT_TPL: &str = "dec.rtpl";
const SENT_TPL: &str = "dec.stpl";
const SENT_ANCHOR: &str = "dec.sanchor";
const WORD_ANCHOR: &str = "dec.wanchor";
const DISEASE: &str = "dec.disease";
const SENT_LSTM: &str = "dec.sent";
const WORD_LSTM: &str = "dec.word";
const OUT: &str = "dec.out";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// No report template; sentences are retrieved from every training report.
    NoVlrm,
    /// No sentence templates at either level.
    NoLlrm,
    /// One flat word LSTM over the whole report.
    NoHld,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoVlrm, Variant::NoLlrm, Variant::NoHld];

    pub fn report_template(self) -> bool {
        self != Variant::NoVlrm
    }

    pub fn sentence_template(self) -> bool {
        matches!(self, Variant::Full | Variant::NoVlrm)
    }

    pub fn hierarchical(self) -> bool {
        self != Variant::NoHld
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVlrm => "no-vlrm",
            Variant::NoLlrm => "no-llrm",
            Variant::NoHld => "no-hld",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?}; expected full, no-vlrm, no-llrm or no-hld")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
    pub views: usize,
    pub attention_hidden: usize,
    pub keywords: usize,
    pub diseases: usize,
    pub vocab: usize,
}

impl DecoderDims {
    pub fn from_config(cfg: &Config, vocab: usize) -> Self {
        Self {
            features: cfg.model.features,
            hidden: cfg.model.decoder_hidden,
            classes: cfg.corpus.world.classes,
            views: cfg.corpus.world.views,
            attention_hidden: cfg.model.attention_hidden,
            keywords: cfg.retrieval.keywords,
            diseases: cfg.retrieval.diseases,
            vocab,
        }
    }

    fn queries(&self) -> usize {
        self.keywords + self.diseases
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub store: ParameterStore,
    pub dims: DecoderDims,
    pub variant: Variant,
}

/// Keyword queries and retrieved values for one template computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateInputs {
    pub values: Vec<Vec<f64>>,
    pub keywords: Vec<Vec<f64>>,
    pub ids: Vec<usize>,
}

/// Which training sentences a subject may retrieve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceSource {
    /// Source reports; `None` admits every report.
    pub reports: Option<Vec<usize>>,
    pub exclude_report: Option<usize>,
}

impl SentenceSource {
    fn admits(&self, e: &PoolEntry<crate::llr::SentencePayload>) -> bool {
        let r = e.payload.report_id;
        Some(r) != self.exclude_report && self.reports.as_ref().is_none_or(|ids| ids.contains(&r))
    }
}

/// Everything the frozen stages contribute for one subject, computed once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleContext {
    pub sample_id: usize,
    pub encoding: SubjectEncoding,
    pub retrieved: Vec<RetrievedReport>,
    pub report_inputs: TemplateInputs,
    /// Top-`m` predicted classes.
    pub diseases: Vec<usize>,
    pub source: SentenceSource,
    /// Word targets per ground-truth sentence, each ending in END, followed
    /// by the empty terminal sentence `[END]`. Empty outside training.
    pub targets: Vec<Vec<usize>>,
    /// Retrieval driven by each ground-truth sentence, for the next one.
    pub sentence_inputs: Vec<TemplateInputs>,
}

/// Frozen artifacts shared by every subject.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub vlr: &'a VlrModel,
    pub llr: &'a LlrModel,
    pub vocab: &'a Vocabulary,
    pub dictionary: &'a KeywordDictionary,
    pub reports: &'a ReportPool,
    /// Every training sentence.
    pub sentences: &'a SentencePool,
    pub retrieval: &'a RetrievalConfig,
}

impl Frozen<'_> {
    fn sentence_embedding(&self, report_id: usize, index: usize, tokens: &[String]) -> Result<Vec<f64>> {
        let id = sentence_id(report_id, index);
        let entries = self.sentences.entries();
        match entries.binary_search_by_key(&id, |e| e.id) {
            Ok(i) if entries[i].payload.tokens == tokens => Ok(entries[i].embedding.clone()),
            _ => self.llr.embed_sentence(self.vlr, &self.vocab.encode(tokens)),
        }
    }

    /// Top-`k_s` admissible sentences for query embedding `o`, clamped to
    /// what the source offers.
    pub fn retrieve(&self, o: &[f64], source: &SentenceSource) -> Result<Vec<RetrievedSentence>> {
        let available = self.sentences.count_where(|e| source.admits(e));
        let mut k = self.retrieval.sentences;
        if k > available {
            log::warn!("k_s = {k} exceeds the {available} candidate sentences; using all");
            k = available;
        }
        Ok(self
            .sentences
            .top_k_where(o, k, |e| source.admits(e))?
            .into_iter()
            .map(|h| {
                let e = self.sentences.entry(h.index);
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

    pub fn sentence_inputs(&self, retrieved: &[RetrievedSentence]) -> Result<TemplateInputs> {
        let words = sentence_keywords(retrieved, self.dictionary, self.retrieval.keywords);
        Ok(TemplateInputs {
            values: retrieved.iter().map(|s| s.embedding.clone()).collect(),
            keywords: self.vlr.word_embeddings(self.vocab, &words)?,
            ids: retrieved.iter().map(|s| s.id).collect(),
        })
    }

    /// Builds the frozen context. During training (`teacher`), the subject's
    /// own report is excluded from retrieval and targets are filled in.
    pub fn context(&self, sample: &CorpusSample, variant: Variant, limits: &GenerationConfig, teacher: bool) -> Result<SampleContext> {
        let encoding = self.vlr.encode_subject(&sample.views)?;
        let own = teacher.then_some(sample.id);
        let retrieved = retrieve_reports(&encoding.v, self.reports, self.retrieval.reports, own)?;
        let words = report_keywords(&retrieved, self.dictionary, self.retrieval.keywords);
        let report_inputs = TemplateInputs {
            values: retrieved.iter().map(|r| r.embedding.clone()).collect(),
            keywords: self.vlr.word_embeddings(self.vocab, &words)?,
            ids: retrieved.iter().map(|r| r.id).collect(),
        };
        let diseases = top_diseases(&encoding.c_pred, self.retrieval.diseases);
        let source = SentenceSource {
            reports: variant.report_template().then(|| retrieved.iter().map(|r| r.id).collect()),
            exclude_report: own,
        };
        let mut targets = Vec::new();
        let mut sentence_inputs = Vec::new();
        if teacher {
            if variant.hierarchical() {
                for (j, s) in sample.sentences.iter().enumerate().filter(|(_, s)| !s.is_empty()) {
                    let mut ids = self.vocab.encode(&s[..s.len().min(limits.max_words)]);
                    ids.push(END);
                    targets.push(ids);
                    if variant.sentence_template() {
                        let o = self.sentence_embedding(sample.id, j, s)?;
                        sentence_inputs.push(self.sentence_inputs(&self.retrieve(&o, &source)?)?);
                    }
                }
                targets.push(vec![END]);
            } else {
                let tokens = sample.report_tokens();
                let mut ids = self.vocab.encode(&tokens[..tokens.len().min(limits.max_flat_words)]);
                ids.push(END);
                targets.push(ids);
            }
        }
        Ok(SampleContext {
            sample_id: sample.id,
            encoding,
            retrieved,
            report_inputs,
            diseases,
            source,
            targets,
            sentence_inputs,
        })
    }
}

/// Per-subject graph nodes reused by every step.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub maps: Vec<NodeId>,
    sent_proj: Vec<NodeId>,
    word_proj: Vec<NodeId>,
    pub c_pred: NodeId,
    pub r_s: NodeId,
    pub diseases: NodeId,
    zero_d: NodeId,
    zero_h: NodeId,
}

/// One emitted report with its retrieval and attention trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub sample_id: usize,
    pub sentences: Vec<Vec<String>>,
    pub retrieved_report_ids: Vec<usize>,
    /// Sentences retrieved after each emitted sentence.
    pub retrieved_sentence_ids: Vec<Vec<usize>>,
    pub retrieved_sentence_scores: Vec<Vec<f64>>,
    /// Raw ids per sentence: START, the words, then END unless cut by the cap.
    pub emitted: Vec<Vec<usize>>,
    /// Whether each sentence step read a sentence template.
    pub template_reads: Vec<bool>,
    pub attention: AttentionDump,
}

impl Generation {
    pub fn tokens_emitted(&self) -> usize {
        self.emitted.iter().map(|s| s.len() - 1).sum()
    }

    pub fn report_tokens(&self) -> Vec<String> {
        self.sentences.iter().flatten().cloned().collect()
    }
}

impl DecoderModel {
    pub fn new<R: Rng>(dims: DecoderDims, variant: Variant, rng: &mut R) -> Result<Self> {
        let DecoderDims {
            features: d,
            hidden: h,
            classes: c,
            views: b,
            attention_hidden: a,
            vocab: v,
            ..
        } = dims;
        let q = dims.queries();
        let mut store = ParameterStore::new();
        store.add_weight(H0, &[h], h, rng)?;
        if let Some(t) = store.get_mut(H0) {
            t.set_requires_grad(false);
        }
        init_spatial_attention(&mut store, SENT_ATT, d, h + c, a, rng)?;
        init_spatial_attention(&mut store, WORD_ATT, d, h, a, rng)?;
        init_fusion(&mut store, SENT_FUSE, b, d, rng)?;
        init_fusion(&mut store, WORD_FUSE, b, d, rng)?;
        init_multi_query(&mut store, REPORT_TPL, d, q, rng)?;
        init_multi_query(&mut store, SENT_TPL, d, q, rng)?;
        init_linear(&mut store, SENT_ANCHOR, h, d, rng)?;
        init_linear(&mut store, WORD_ANCHOR, h, d, rng)?;
        store.add_weight(DISEASE, &[c, d], 1, rng)?;
        init_lstm(&mut store, SENT_LSTM, LstmDims { input: 3 * d, hidden: h }, rng)?;
        init_lstm(&mut store, WORD_LSTM, LstmDims { input: h + 3 * d, hidden: h }, rng)?;
        init_linear(&mut store, OUT, h, v, rng)?;
        Ok(Self { store, dims, variant })
    }

    pub fn from_store(store: ParameterStore, dims: DecoderDims, variant: Variant) -> Result<Self> {
        let out = store.tensor(&format!("{OUT}.w"))?;
        if out.shape() != [dims.vocab, dims.hidden] {
            return Err(Error::dim("decoder output layer", out.shape(), &[dims.vocab, dims.hidden]));
        }
        Ok(Self { store, dims, variant })
    }

    /// Creates the shared step nodes: image maps as constants, the
    /// condition-independent attention projections, `r_s` and the disease queries.
    pub fn step_inputs(&self, g: &mut Graph, ctx: &SampleContext) -> Result<StepInputs> {
        let maps: Vec<NodeId> = ctx.encoding.maps.iter().map(|m| g.constant(m.clone())).collect();
        let sent_proj = maps
            .iter()
            .map(|&m| project_cells(g, &self.store, SENT_ATT, m))
            .collect::<Result<Vec<_>>>()?;
        let word_proj = maps
            .iter()
            .map(|&m| project_cells(g, &self.store, WORD_ATT, m))
            .collect::<Result<Vec<_>>>()?;
        let c_pred = g.constant(Tensor::vector(ctx.encoding.c_pred.clone()));
        let table = g.param(&self.store, DISEASE)?;
        let diseases = g.gather(table, &ctx.diseases)?;
        let zero_d = g.constant(Tensor::zeros(&[self.dims.features]));
        let zero_h = g.constant(Tensor::zeros(&[self.dims.hidden]));
        let r_s = if self.variant.report_template() {
            let v = g.constant(Tensor::vector(ctx.encoding.v.clone()));
            report_template(
                g,
                &self.store,
                REPORT_TPL,
                v,
                &ctx.report_inputs.values,
                &ctx.report_inputs.keywords,
                self.dims.keywords,
                diseases,
            )?
            .output
        } else {
            zero_d
        };
        Ok(StepInputs {
            maps,
            sent_proj,
            word_proj,
            c_pred,
            r_s,
            diseases,
            zero_d,
            zero_h,
        })
    }

    fn attend_views(
        &self,
        g: &mut Graph,
        prefix: &str,
        fusion: &str,
        projections: &[NodeId],
        maps: &[NodeId],
        condition: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut attended = Vec::with_capacity(maps.len());
        let mut weights = Vec::with_capacity(maps.len());
        for (&p, &m) in projections.iter().zip(maps) {
            let att = spatial_scores_projected(g, &self.store, prefix, p, condition)?;
            attended.push(attend_spatial(g, m, att.weights)?);
            weights.push(att.weights);
        }
        Ok((fuse_views(g, &self.store, fusion, &attended)?, weights))
    }

    /// The initial sentence state: the stored `h_0` and a zero cell.
    pub fn initial_state(&self, g: &mut Graph) -> Result<LstmState> {
        let h = g.param(&self.store, H0)?;
        let c = g.constant(Tensor::zeros(&[self.dims.hidden]));
        Ok(LstmState { h, c })
    }

    /// `h^s_t = LSTM_s(concat(v^s, u_{t-1}, r_s))`, with `v^s` attended under
    /// the condition `concat(h^s_{t-1}, c_pred)`.
    pub fn sentence_step(&self, g: &mut Graph, inputs: &StepInputs, prev: LstmState, u_prev: NodeId) -> Result<(LstmState, Vec<NodeId>)> {
        let cond = g.concat(&[prev.h, inputs.c_pred], 0)?;
        let (v_s, weights) = self.attend_views(g, SENT_ATT, SENT_FUSE, &inputs.sent_proj, &inputs.maps, cond)?;
        let x = g.concat(&[v_s, u_prev, inputs.r_s], 0)?;
        Ok((lstm_cell(g, &self.store, SENT_LSTM, x, prev)?, weights))
    }

    /// `h^w_i = LSTM_w(concat(h^s_t, u^w, v^w, r_s))` with `v^w` attended
    /// under `h^w_{i-1}`; returns the new state and the vocabulary logits.
    pub fn word_step(
        &self,
        g: &mut Graph,
        inputs: &StepInputs,
        h_s: NodeId,
        prev: LstmState,
        u_word: NodeId,
    ) -> Result<(LstmState, NodeId, Vec<NodeId>)> {
        let (v_w, weights) = self.attend_views(g, WORD_ATT, WORD_FUSE, &inputs.word_proj, &inputs.maps, prev.h)?;
        let x = g.concat(&[h_s, u_word, v_w, inputs.r_s], 0)?;
        let state = lstm_cell(g, &self.store, WORD_LSTM, x, prev)?;
        let logits = linear_layer(g, &self.store, OUT, state.h)?;
        Ok((state, logits, weights))
    }

    pub fn template_memory(&self, g: &mut Graph, inputs: &StepInputs, t: &TemplateInputs) -> Result<QueryMemory> {
        let values = stack_values(g, &t.values)?;
        let queries = query_set(g, &t.keywords, self.dims.keywords, inputs.diseases)?;
        prepare_memory(g, &self.store, SENT_TPL, queries, values)
    }

    /// `u` with the hidden state `hidden`, projected by `anchor`, as key anchor.
    fn template(&self, g: &mut Graph, memory: &QueryMemory, anchor: &str, hidden: NodeId) -> Result<(NodeId, NodeId)> {
        let a = linear_layer(g, &self.store, anchor, hidden)?;
        let out = attend_memory(g, &self.store, SENT_TPL, memory, a)?;
        Ok((out.output, out.weights))
    }

    pub fn sentence_template(&self, g: &mut Graph, memory: &QueryMemory, hidden: NodeId) -> Result<NodeId> {
        Ok(self.template(g, memory, SENT_ANCHOR, hidden)?.0)
    }

    pub fn word_template(&self, g: &mut Graph, memory: &QueryMemory, hidden: NodeId) -> Result<NodeId> {
        Ok(self.template(g, memory, WORD_ANCHOR, hidden)?.0)
    }

    fn zero_word_state(&self, inputs: &StepInputs) -> LstmState {
        LstmState {
            h: inputs.zero_h,
            c: inputs.zero_h,
        }
    }

    /// Mean cross-entropy over every target position of the subject. Only
    /// decoder parameters receive gradients; the context is constant.
    pub fn teacher_forced_loss(&self, g: &mut Graph, ctx: &SampleContext) -> Result<NodeId> {
        if ctx.targets.is_empty() {
            return Err(Error::Validation("context has no targets; build it with teacher = true".into()));
        }
        let inputs = self.step_inputs(g, ctx)?;
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        if !self.variant.hierarchical() {
            let mut w = self.zero_word_state(&inputs);
            for &y in &ctx.targets[0] {
                let (s, l, _) = self.word_step(g, &inputs, inputs.zero_h, w, inputs.zero_d)?;
                w = s;
                logits.push(l);
                targets.push(y);
            }
        } else {
            let mut state = self.initial_state(g)?;
            for (t, words) in ctx.targets.iter().enumerate() {
                let memory = match (t, self.variant.sentence_template()) {
                    (1.., true) => Some(self.template_memory(g, &inputs, &ctx.sentence_inputs[t - 1])?),
                    _ => None,
                };
                let u_prev = match &memory {
                    Some(m) => self.sentence_template(g, m, state.h)?,
                    None => inputs.zero_d,
                };
                state = self.sentence_step(g, &inputs, state, u_prev)?.0;
                let mut w = self.zero_word_state(&inputs);
                for &y in words {
                    let u_word = match &memory {
                        Some(m) => self.word_template(g, m, w.h)?,
                        None => inputs.zero_d,
                    };
                    let (s, l, _) = self.word_step(g, &inputs, state.h, w, u_word)?;
                    w = s;
                    logits.push(l);
                    targets.push(y);
                }
            }
        }
        let flat = g.concat(&logits, 0)?;
        let stacked = g.reshape(flat, &[logits.len(), self.dims.vocab])?;
        g.cross_entropy(stacked, &targets)
    }

    /// Greedy generation. Sentences end at END or after `max_words` words;
    /// the report ends at an empty sentence (see [`first_word`]) or after
    /// `max_sentences`.
    pub fn generate(&self, frozen: &Frozen, ctx: &SampleContext, limits: &GenerationConfig) -> Result<Generation> {
        let mut g = Graph::new();
        let inputs = self.step_inputs(&mut g, ctx)?;
        let mut out = Generation {
            sample_id: ctx.sample_id,
            sentences: Vec::new(),
            retrieved_report_ids: ctx.retrieved.iter().map(|r| r.id).collect(),
            retrieved_sentence_ids: Vec::new(),
            retrieved_sentence_scores: Vec::new(),
            emitted: Vec::new(),
            template_reads: Vec::new(),
            attention: AttentionDump::default(),
        };
        if !self.variant.hierarchical() {
            let (words, raw) = self.write_sentence(&mut g, &inputs, inputs.zero_h, None, limits.max_flat_words)?;
            out.emitted.push(raw);
            out.template_reads.push(false);
            if !words.is_empty() {
                out.sentences.push(frozen.vocab.decode(&words));
            }
            return Ok(out);
        }
        let mut state = self.initial_state(&mut g)?;
        let mut memory: Option<QueryMemory> = None;
        for _ in 0..limits.max_sentences {
            let u_prev = match &memory {
                Some(m) => {
                    let (u, w) = self.template(&mut g, m, SENT_ANCHOR, state.h)?;
                    out.attention.queries.push(grid_of(&g, w));
                    u
                }
                None => inputs.zero_d,
            };
            out.template_reads.push(memory.is_some());
            let (s, weights) = self.sentence_step(&mut g, &inputs, state, u_prev)?;
            state = s;
            out.attention.spatial.push(weights.iter().map(|&w| grid_of(&g, w)).collect());
            let (ids, raw) = self.write_sentence(&mut g, &inputs, state.h, memory.as_ref(), limits.max_words)?;
            out.emitted.push(raw);
            if ids.is_empty() {
                break;
            }
            let words = frozen.vocab.decode(&ids);
            if self.variant.sentence_template() {
                let o = frozen.llr.embed_sentence(frozen.vlr, &ids)?;
                let retrieved = frozen.retrieve(&o, &ctx.source)?;
                out.retrieved_sentence_ids.push(retrieved.iter().map(|s| s.id).collect());
                out.retrieved_sentence_scores.push(retrieved.iter().map(|s| s.score).collect());
                let t = frozen.sentence_inputs(&retrieved)?;
                memory = Some(self.template_memory(&mut g, &inputs, &t)?);
            }
            out.sentences.push(words);
        }
        Ok(out)
    }

    /// Runs the word loop for one sentence; returns the word ids and the
    /// raw emission starting with START.
    fn write_sentence(
        &self,
        g: &mut Graph,
        inputs: &StepInputs,
        h_s: NodeId,
        memory: Option<&QueryMemory>,
        max_words: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut w = self.zero_word_state(inputs);
        let mut raw = vec![START];
        let mut words = Vec::new();
        for i in 0..max_words {
            let u_word = match memory {
                Some(m) => self.word_template(g, m, w.h)?,
                None => inputs.zero_d,
            };
            let (s, logits, _) = self.word_step(g, inputs, h_s, w, u_word)?;
            w = s;
            let token = if i == 0 && self.variant.hierarchical() {
                first_word(g.data(logits))
            } else {
                argmax(g.data(logits))
            };
            raw.push(token);
            if token == END {
                break;
            }
            words.push(token);
        }
        Ok((words, raw))
    }
}

/// The opening word of a hierarchical sentence. An END here closes the
/// report, so it is a stop-or-continue decision: END only when it holds at
/// least half the mass, otherwise the best other word.
pub fn first_word(logits: &[f64]) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    if (logits[END] - max).exp() >= 0.5 * total {
        return END;
    }
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if i != END && x > logits[best] {
            best = i;
        }
    }
    best
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
