//! The three training stages, generation, evaluation and the ablation
//! harness, as library calls. [`commands`] wraps them with on-disk artifacts.

mod checkpoint;
pub mod commands;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, StageTag, FORMAT_VERSION};

use crate::config::{Config, Schedule};
use crate::corpus::{
    build_keyword_dictionary, build_vocab, generate_corpus, read_corpus, read_json, select, split, write_corpus,
    write_json, CorpusSample, KeywordDictionary, Split, SyntheticWorld, Vocabulary,
};
use crate::decoder::{DecoderDims, DecoderModel, Frozen, Generation, SampleContext, Variant};
use crate::error::{Error, Result};
use crate::llr::{self, build_all_sentences_pool, LlrModel, SentencePool};
use crate::metrics::{MetricReport, MetricTable};
use crate::numerics::{clip_and_step, AdamState, Graph};
use crate::seed::{derive_seed, rng_for};
use crate::vlr::{self, build_report_pool, retrieve_reports, stage_optimizer, ReportPool, VlrEvaluation, VlrLosses, VlrModel};

/// Piecewise-constant multiplicative learning-rate schedule.
pub fn lr_schedule(epoch: usize, base: f64, schedule: &Schedule) -> f64 {
    schedule.lr(epoch, base)
}

/// Everything derived from the corpus alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub corpus: Vec<CorpusSample>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub split: Split,
    pub vocab: Vocabulary,
    pub dictionary: KeywordDictionary,
    /// Keywords that signal each class in a report.
    pub class_keywords: Vec<Vec<String>>,
}

const CORPUS_FILE: &str = "corpus.jsonl";
const META_FILE: &str = "dataset.json";

impl Dataset {
    pub fn synthesize(cfg: &Config) -> Result<Self> {
        let world = SyntheticWorld::new(cfg.corpus.world.clone())?;
        let corpus = generate_corpus(derive_seed(cfg.seed, "corpus"), cfg.corpus.samples, &world)?;
        let [a, b, c] = cfg.corpus.split;
        let split = split(&corpus, (a, b, c), derive_seed(cfg.seed, "split"))?;
        let train = select(&corpus, &split.train);
        let vocab = build_vocab(train.iter().copied(), cfg.corpus.min_count)?;
        let dictionary = build_keyword_dictionary(
            train.iter().copied(),
            &world.domain_terms(),
            &vocab,
            cfg.corpus.dictionary_size,
        )?;
        Ok(Self {
            meta: DatasetMeta {
                split,
                vocab,
                dictionary,
                class_keywords: world.class_keywords(),
            },
            corpus,
        })
    }

    pub fn train(&self) -> Vec<&CorpusSample> {
        select(&self.corpus, &self.meta.split.train)
    }

    pub fn val(&self) -> Vec<&CorpusSample> {
        select(&self.corpus, &self.meta.split.val)
    }

    pub fn test(&self) -> Vec<&CorpusSample> {
        select(&self.corpus, &self.meta.split.test)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&dir.join(CORPUS_FILE), &self.corpus)?;
        write_json(&dir.join(META_FILE), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corpus_path = dir.join(CORPUS_FILE);
        if !corpus_path.exists() {
            return Err(Error::MissingArtifact {
                what: "synthetic corpus".into(),
                path: corpus_path,
                command: "hrgen synth-data",
            });
        }
        Ok(Self {
            corpus: read_corpus(&corpus_path)?,
            meta: read_json(&dir.join(META_FILE))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct VlrStage {
    pub model: VlrModel,
    pub optimizer: AdamState,
    pub history: Vec<VlrLosses>,
}

pub fn pretrain_vlr(cfg: &Config, data: &Dataset) -> Result<VlrStage> {
    let mut rng = rng_for(cfg.seed, "vlr/init");
    let mut model = VlrModel::new(cfg, data.meta.vocab.len(), &mut rng)?;
    let mut optimizer = stage_optimizer(&cfg.vlr);
    let history = vlr::pretrain(
        &mut model,
        &data.train(),
        &data.meta.vocab,
        &cfg.vlr,
        &mut optimizer,
        derive_seed(cfg.seed, "vlr/train"),
    )?;
    Ok(VlrStage {
        model,
        optimizer,
        history,
    })
}

/// Matching accuracy and disease AUC on the test split.
pub fn evaluate_vlr(cfg: &Config, data: &Dataset, model: &VlrModel) -> Result<VlrEvaluation> {
    vlr::evaluate(model, &data.test(), &data.meta.vocab, derive_seed(cfg.seed, "vlr/eval"))
}

#[derive(Clone, Debug)]
pub struct LlrStage {
    pub model: LlrModel,
    pub optimizer: AdamState,
    pub history: Vec<f64>,
}

pub fn pretrain_llr(cfg: &Config, data: &Dataset, vlr: &VlrModel) -> Result<LlrStage> {
    let mut rng = rng_for(cfg.seed, "llr/init");
    let mut model = LlrModel::new(cfg, &mut rng)?;
    let mut optimizer = stage_optimizer(&cfg.llr);
    let train = data.train();
    let pairs = cfg.llr.pairs.unwrap_or(2 * train.len());
    let history = llr::pretrain(
        &mut model,
        vlr,
        &train,
        &data.meta.vocab,
        &cfg.llr,
        &mut optimizer,
        pairs,
        derive_seed(cfg.seed, "llr/train"),
    )?;
    Ok(LlrStage {
        model,
        optimizer,
        history,
    })
}

/// Same-report pair accuracy on balanced test-split pairs.
pub fn evaluate_llr(cfg: &Config, data: &Dataset, vlr: &VlrModel, model: &LlrModel) -> Result<f64> {
    let test = data.test();
    llr::evaluate(model, vlr, &test, &data.meta.vocab, 2 * test.len(), derive_seed(cfg.seed, "llr/eval"))
}

/// The frozen retrieval pools: every training report and every training sentence.
#[derive(Clone, Debug)]
pub struct Pools {
    pub reports: ReportPool,
    pub sentences: SentencePool,
}

pub fn build_pools(data: &Dataset, vlr: &VlrModel, llr: &LlrModel) -> Result<Pools> {
    let train = data.train();
    Ok(Pools {
        reports: build_report_pool(vlr, &train, &data.meta.vocab)?,
        sentences: build_all_sentences_pool(llr, vlr, &data.meta.vocab, &train)?,
    })
}

pub fn frozen<'a>(cfg: &'a Config, data: &'a Dataset, vlr: &'a VlrModel, llr: &'a LlrModel, pools: &'a Pools) -> Frozen<'a> {
    Frozen {
        vlr,
        llr,
        vocab: &data.meta.vocab,
        dictionary: &data.meta.dictionary,
        reports: &pools.reports,
        sentences: &pools.sentences,
        retrieval: &cfg.retrieval,
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub model: DecoderModel,
    pub optimizer: AdamState,
    pub history: Vec<f64>,
}

/// Trains the decoder for `variant` with the retrieval artifacts frozen.
/// Per-subject contexts are computed once and reused every epoch.
pub fn train_decoder(cfg: &Config, data: &Dataset, frozen: &Frozen, variant: Variant) -> Result<DecoderStage> {
    let dims = DecoderDims::from_config(cfg, data.meta.vocab.len());
    let mut model = DecoderModel::new(dims, variant, &mut rng_for(cfg.seed, "decoder/init"))?;
    let stage = &cfg.decoder;
    let mut optimizer = stage_optimizer(stage);
    let contexts: Vec<SampleContext> = data
        .train()
        .iter()
        .map(|s| frozen.context(s, variant, &cfg.generation, true))
        .collect::<Result<_>>()?;
    let mut rng = rng_for(cfg.seed, &format!("decoder/batches/{variant}"));
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    let mut history = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        optimizer.config.lr = stage.schedule.lr(epoch, stage.lr);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(stage.batch_size) {
            let mut g = Graph::new();
            let mut sum = None;
            for &i in chunk {
                let l = model.teacher_forced_loss(&mut g, &contexts[i])?;
                sum = Some(match sum {
                    Some(s) => g.add(s, l)?,
                    None => l,
                });
            }
            let loss = g.scale(sum.expect("non-empty chunk"), 1.0 / chunk.len() as f64)?;
            g.backward(loss, &mut model.store)?;
            clip_and_step(&mut model.store, &mut optimizer, stage.clip)?;
            total += g.value(loss).item();
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("decoder[{variant}] epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok(DecoderStage {
        model,
        optimizer,
        history,
    })
}

/// Generates reports for `samples` in sample order, without self-exclusion.
pub fn generate(cfg: &Config, model: &DecoderModel, frozen: &Frozen, samples: &[&CorpusSample]) -> Result<Vec<Generation>> {
    samples
        .iter()
        .map(|s| {
            let ctx = frozen.context(s, model.variant, &cfg.generation, false)?;
            model.generate(frozen, &ctx, &cfg.generation)
        })
        .collect()
}

/// The top-1 retrieved training report, copied verbatim, as the prediction.
pub fn retrieval_baseline(frozen: &Frozen, samples: &[&CorpusSample]) -> Result<Vec<Vec<String>>> {
    samples
        .iter()
        .map(|s| {
            let enc = frozen.vlr.encode_subject(&s.views)?;
            let top = retrieve_reports(&enc.v, frozen.reports, 1, None)?;
            Ok(top[0].sentences.iter().flatten().cloned().collect())
        })
        .collect()
}

/// Scores flattened predictions against the samples' reports and labels.
pub fn score(data: &Dataset, predictions: &[Vec<String>], samples: &[&CorpusSample]) -> Result<MetricReport> {
    let references: Vec<Vec<String>> = samples.iter().map(|s| s.report_tokens()).collect();
    let labels: Vec<Vec<usize>> = samples.iter().map(|s| s.labels.clone()).collect();
    MetricReport::compute(predictions, &references, &labels, &data.meta.class_keywords)
}

pub fn score_generations(data: &Dataset, generations: &[Generation], samples: &[&CorpusSample]) -> Result<MetricReport> {
    let predictions: Vec<Vec<String>> = generations.iter().map(Generation::report_tokens).collect();
    score(data, &predictions, samples)
}

/// Results of one full run: retrieval baseline plus every requested variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub vlr: VlrEvaluation,
    pub llr_accuracy: f64,
    pub table: MetricTable,
}

pub const BASELINE_ROW: &str = "vl-retrieval";

/// Synthesizes data, runs all three stages for each of `variants` and
/// evaluates on the test split.
pub fn run_all(cfg: &Config, variants: &[Variant]) -> Result<RunReport> {
    let data = Dataset::synthesize(cfg)?;
    let vlr_stage = pretrain_vlr(cfg, &data)?;
    let llr_stage = pretrain_llr(cfg, &data, &vlr_stage.model)?;
    let pools = build_pools(&data, &vlr_stage.model, &llr_stage.model)?;
    let frozen = frozen(cfg, &data, &vlr_stage.model, &llr_stage.model, &pools);
    let test = data.test();
    let mut table = MetricTable::default();
    let baseline = retrieval_baseline(&frozen, &test)?;
    table.rows.push((BASELINE_ROW.to_string(), score(&data, &baseline, &test)?));
    for &variant in variants {
        let stage = train_decoder(cfg, &data, &frozen, variant)?;
        let generations = generate(cfg, &stage.model, &frozen, &test)?;
        table.rows.push((variant.to_string(), score_generations(&data, &generations, &test)?));
    }
    Ok(RunReport {
        vlr: evaluate_vlr(cfg, &data, &vlr_stage.model)?,
        llr_accuracy: evaluate_llr(cfg, &data, &vlr_stage.model, &llr_stage.model)?,
        table,
    })
}
