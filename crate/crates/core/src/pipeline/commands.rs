//! One function per CLI subcommand. Each reads its predecessors' artifacts,
//! runs its stage and writes its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    build_pools, evaluate_llr, evaluate_vlr, frozen, generate, pretrain_llr, pretrain_vlr, retrieval_baseline, score,
    score_generations, train_decoder, Checkpoint, Dataset, Pools, StageTag, BASELINE_ROW,
};
use crate::attention::AttentionDump;
use crate::config::Config;
use crate::corpus::{write_json, write_jsonl};
use crate::decoder::{DecoderDims, DecoderModel, Generation, Variant};
use crate::error::{Error, Result};
use crate::llr::{LlrModel, SentenceTrace};
use crate::metrics::{MetricReport, MetricTable};
use crate::vlr::{retrieve_reports, ReportTrace, VlrEvaluation, VlrModel};

/// Where a command reads and writes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paths {
    /// Output of `synth-data`.
    pub data: PathBuf,
    /// Directory holding earlier stages' checkpoints.
    pub checkpoints: PathBuf,
    /// Directory this command writes to.
    pub out: PathBuf,
}

impl Paths {
    /// Reads and writes everything under one run directory.
    pub fn single(data: &Path, run: &Path) -> Self {
        Self {
            data: data.to_path_buf(),
            checkpoints: run.to_path_buf(),
            out: run.to_path_buf(),
        }
    }
}

pub const VLR_CHECKPOINT: &str = "vlr.ckpt.json";
pub const LLR_CHECKPOINT: &str = "llr.ckpt.json";

pub fn decoder_checkpoint(variant: Variant) -> String {
    format!("decoder-{variant}.ckpt.json")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synth_data(cfg: &Config, paths: &Paths) -> Result<Dataset> {
    let data = Dataset::synthesize(cfg)?;
    data.save(&paths.out)?;
    log::info!(
        "wrote {} samples ({} train / {} val / {} test), vocabulary {}",
        data.corpus.len(),
        data.meta.split.train.len(),
        data.meta.split.val.len(),
        data.meta.split.test.len(),
        data.meta.vocab.len()
    );
    Ok(data)
}

pub fn pretrain_vlr_cmd(cfg: &Config, paths: &Paths) -> Result<VlrEvaluation> {
    let data = Dataset::load(&paths.data)?;
    let stage = pretrain_vlr(cfg, &data)?;
    ensure_dir(&paths.out)?;
    Checkpoint::new(StageTag::Vlr, cfg.fingerprint()?, stage.model.store.clone(), Some(stage.optimizer))
        .save(&paths.out.join(VLR_CHECKPOINT))?;
    let pool = crate::vlr::build_report_pool(&stage.model, &data.train(), &data.meta.vocab)?;
    write_jsonl(&paths.out.join("report_pool.jsonl"), pool.entries())?;
    let traces = data
        .test()
        .iter()
        .map(|s| {
            let enc = stage.model.encode_subject(&s.views)?;
            let hits = retrieve_reports(&enc.v, &pool, cfg.retrieval.reports, None)?;
            Ok(ReportTrace::new(s.id, &hits))
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&paths.out.join("report_trace.jsonl"), &traces)?;
    let eval = evaluate_vlr(cfg, &data, &stage.model)?;
    write_json(&paths.out.join("vlr_eval.json"), &eval)?;
    Ok(eval)
}

fn load_vlr(cfg: &Config, paths: &Paths) -> Result<VlrModel> {
    let ck = Checkpoint::load(&paths.checkpoints.join(VLR_CHECKPOINT), StageTag::Vlr, &cfg.fingerprint()?)?;
    VlrModel::from_store(ck.params, cfg)
}

fn load_llr(cfg: &Config, paths: &Paths) -> Result<LlrModel> {
    let ck = Checkpoint::load(&paths.checkpoints.join(LLR_CHECKPOINT), StageTag::Llr, &cfg.fingerprint()?)?;
    LlrModel::from_store(ck.params, cfg)
}

pub fn pretrain_llr_cmd(cfg: &Config, paths: &Paths) -> Result<f64> {
    let data = Dataset::load(&paths.data)?;
    let vlr = load_vlr(cfg, paths)?;
    let stage = pretrain_llr(cfg, &data, &vlr)?;
    ensure_dir(&paths.out)?;
    Checkpoint::new(StageTag::Llr, cfg.fingerprint()?, stage.model.store.clone(), Some(stage.optimizer))
        .save(&paths.out.join(LLR_CHECKPOINT))?;
    let accuracy = evaluate_llr(cfg, &data, &vlr, &stage.model)?;
    write_json(&paths.out.join("llr_eval.json"), &serde_json::json!({ "pair_accuracy": accuracy }))?;
    Ok(accuracy)
}

/// The data set and both frozen retrieval stages.
struct Frozen {
    data: Dataset,
    vlr: VlrModel,
    llr: LlrModel,
    pools: Pools,
}

fn load_frozen(cfg: &Config, paths: &Paths) -> Result<Frozen> {
    let data = Dataset::load(&paths.data)?;
    let vlr = load_vlr(cfg, paths)?;
    let llr = load_llr(cfg, paths)?;
    let pools = build_pools(&data, &vlr, &llr)?;
    Ok(Frozen { data, vlr, llr, pools })
}

fn train_and_save(cfg: &Config, paths: &Paths, f: &Frozen, variant: Variant) -> Result<(DecoderModel, Vec<f64>)> {
    let fz = frozen(cfg, &f.data, &f.vlr, &f.llr, &f.pools);
    let stage = train_decoder(cfg, &f.data, &fz, variant)?;
    ensure_dir(&paths.out)?;
    let mut ck = Checkpoint::new(
        StageTag::Decoder,
        cfg.fingerprint()?,
        stage.model.store.clone(),
        Some(stage.optimizer),
    );
    ck.variant = Some(variant);
    ck.save(&paths.out.join(decoder_checkpoint(variant)))?;
    write_json(&paths.out.join(format!("train-{variant}.json")), &stage.history)?;
    Ok((stage.model, stage.history))
}

/// Trains the decoder; returns the mean loss per epoch.
pub fn train_cmd(cfg: &Config, paths: &Paths, variant: Variant) -> Result<Vec<f64>> {
    let f = load_frozen(cfg, paths)?;
    Ok(train_and_save(cfg, paths, &f, variant)?.1)
}

fn load_decoder(cfg: &Config, dir: &Path, f: &Frozen, variant: Variant) -> Result<DecoderModel> {
    let path = dir.join(decoder_checkpoint(variant));
    let ck = Checkpoint::load(&path, StageTag::Decoder, &cfg.fingerprint()?)?;
    if ck.variant != Some(variant) {
        return Err(Error::Validation(format!(
            "{} holds variant {:?}, expected {variant}",
            path.display(),
            ck.variant
        )));
    }
    DecoderModel::from_store(ck.params, DecoderDims::from_config(cfg, f.data.meta.vocab.len()), variant)
}

/// The generation record written to JSON lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_id: usize,
    pub sentences: Vec<Vec<String>>,
    pub retrieved_report_ids: Vec<usize>,
    pub retrieved_sentence_ids: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct AttentionRecord<'a> {
    sample_id: usize,
    attention: &'a AttentionDump,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SentenceTraceRecord {
    sample_id: usize,
    step: usize,
    #[serde(flatten)]
    trace: SentenceTrace,
}

fn write_generations(dir: &Path, variant: Variant, generations: &[Generation]) -> Result<()> {
    ensure_dir(dir)?;
    let records: Vec<GenerationRecord> = generations
        .iter()
        .map(|g| GenerationRecord {
            sample_id: g.sample_id,
            sentences: g.sentences.clone(),
            retrieved_report_ids: g.retrieved_report_ids.clone(),
            retrieved_sentence_ids: g.retrieved_sentence_ids.clone(),
        })
        .collect();
    write_jsonl(&dir.join(format!("generations-{variant}.jsonl")), &records)?;
    let traces: Vec<SentenceTraceRecord> = generations
        .iter()
        .flat_map(|g| {
            g.retrieved_sentence_ids
                .iter()
                .zip(&g.retrieved_sentence_scores)
                .enumerate()
                .map(move |(step, (ids, scores))| SentenceTraceRecord {
                    sample_id: g.sample_id,
                    step,
                    trace: SentenceTrace {
                        query: g.sentences[step].clone(),
                        sentence_ids: ids.clone(),
                        scores: scores.clone(),
                    },
                })
        })
        .collect();
    write_jsonl(&dir.join(format!("sentence_trace-{variant}.jsonl")), &traces)?;
    let attention: Vec<AttentionRecord> = generations
        .iter()
        .map(|g| AttentionRecord {
            sample_id: g.sample_id,
            attention: &g.attention,
        })
        .collect();
    write_json(&dir.join(format!("attention-{variant}.json")), &attention)
}

/// Generates reports for the test split and writes them with their traces.
pub fn generate_cmd(cfg: &Config, paths: &Paths, variant: Variant) -> Result<Vec<Generation>> {
    let f = load_frozen(cfg, paths)?;
    let model = load_decoder(cfg, &paths.checkpoints, &f, variant)?;
    let fz = frozen(cfg, &f.data, &f.vlr, &f.llr, &f.pools);
    let generations = generate(cfg, &model, &fz, &f.data.test())?;
    write_generations(&paths.out, variant, &generations)?;
    Ok(generations)
}

fn write_table(dir: &Path, stem: &str, table: &MetricTable) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join(format!("{stem}.txt")), &table.to_string())?;
    write_json(&dir.join(format!("{stem}.json")), table)
}

fn baseline_row(cfg: &Config, f: &Frozen) -> Result<(String, MetricReport)> {
    let fz = frozen(cfg, &f.data, &f.vlr, &f.llr, &f.pools);
    let test = f.data.test();
    let predictions = retrieval_baseline(&fz, &test)?;
    Ok((BASELINE_ROW.to_string(), score(&f.data, &predictions, &test)?))
}

/// Test-split metrics for `variant` next to the retrieval baseline.
pub fn evaluate_cmd(cfg: &Config, paths: &Paths, variant: Variant) -> Result<MetricTable> {
    let f = load_frozen(cfg, paths)?;
    let model = load_decoder(cfg, &paths.checkpoints, &f, variant)?;
    let fz = frozen(cfg, &f.data, &f.vlr, &f.llr, &f.pools);
    let test = f.data.test();
    let generations = generate(cfg, &model, &fz, &test)?;
    let table = MetricTable {
        rows: vec![
            baseline_row(cfg, &f)?,
            (variant.to_string(), score_generations(&f.data, &generations, &test)?),
        ],
    };
    write_table(&paths.out, &format!("metrics-{variant}"), &table)?;
    Ok(table)
}

/// Evaluates all four variants, training any whose checkpoint is absent.
pub fn ablate_cmd(cfg: &Config, paths: &Paths) -> Result<MetricTable> {
    let f = load_frozen(cfg, paths)?;
    let fz = frozen(cfg, &f.data, &f.vlr, &f.llr, &f.pools);
    let test = f.data.test();
    let mut table = MetricTable {
        rows: vec![baseline_row(cfg, &f)?],
    };
    for variant in Variant::ALL {
        let model = if paths.checkpoints.join(decoder_checkpoint(variant)).exists() {
            load_decoder(cfg, &paths.checkpoints, &f, variant)?
        } else {
            log::info!("no {variant} checkpoint; training it");
            train_and_save(cfg, paths, &f, variant)?.0
        };
        let generations = generate(cfg, &model, &fz, &test)?;
        write_generations(&paths.out, variant, &generations)?;
        table.rows.push((variant.to_string(), score_generations(&f.data, &generations, &test)?));
    }
    write_table(&paths.out, "ablation", &table)?;
    Ok(table)
}
