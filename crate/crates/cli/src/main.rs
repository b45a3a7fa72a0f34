use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hrgen::decoder::Variant;
use hrgen::pipeline::commands::{self, Paths};
use hrgen::Config;

const CONFIG_HELP: &str = "\
CONFIG FILE
  TOML with optional sections; every key has a default and only changed keys
  need to be listed. Run `hrgen config` to print the full effective file.

  seed                        global seed; every stage derives its own stream
  [corpus]      samples, split = [train, val, test], min_count, dictionary_size
  [corpus.world] classes, grid, cells, stamp, noise_sigma, stamp_amplitude,
                style_signal, no_finding_rate, mean_active, view_shift, views,
                world_seed
  [model]       features, patch_hidden, text_hidden, attention_hidden,
                decoder_hidden, max_report_tokens, max_sentence_tokens
  [retrieval]   reports, sentences, keywords, diseases
  [generation]  max_sentences, max_words, max_flat_words
  [vlr] [llr] [decoder]
                epochs, batch_size, lr, image_lr, pairs, weight_decay, clip,
                beta1, beta2, schedule = { kind = \"constant\" }
                  | { kind = \"milestones\", at = [20], factor = 0.1 }
                  | { kind = \"every\", period = 20, factor = 0.2 }

STAGES
  synth-data -> pretrain-vlr -> pretrain-llr -> train -> generate / evaluate
  `ablate` trains whichever decoder variants are missing and compares all four.";

#[derive(Parser, Debug)]
#[command(name = "hrgen", version, about = "Retrieval-augmented hierarchical report generation on a synthetic radiograph corpus", after_long_help = CONFIG_HELP)]
struct Cli {
    /// TOML config; defaults apply to everything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use the published full-scale hyperparameters as the base config.
    #[arg(long, global = true)]
    published: bool,

    /// Corpus directory written by `synth-data`.
    #[arg(long, global = true, default_value = "data")]
    data: PathBuf,

    /// Output directory for this command.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Directory holding earlier stages' checkpoints [default: --out].
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = Variant::Full)]
    variant: Variant,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, split, vocabulary and keyword dictionary into --data.
    SynthData,
    /// Pretrain visual-language retrieval; writes the checkpoint, report pool and traces.
    PretrainVlr,
    /// Pretrain language-language retrieval on top of the frozen VLR checkpoint.
    PretrainLlr,
    /// Train the decoder variant with both retrieval stages frozen.
    Train,
    /// Generate test-split reports with traces and attention dumps.
    Generate,
    /// Score the variant and the retrieval baseline on the test split.
    Evaluate,
    /// Compare all decoder variants against the retrieval baseline.
    Ablate,
    /// Print the effective config as TOML.
    Config,
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match (&cli.config, cli.published) {
        (Some(path), _) => Config::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, true) => Config::published(),
        (None, false) => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let paths = Paths {
        data: cli.data.clone(),
        checkpoints: cli.checkpoint.clone().unwrap_or_else(|| cli.out.clone()),
        out: cli.out.clone(),
    };
    let variant = cli.variant;
    match cli.command {
        Command::SynthData => {
            let out = paths.data.clone();
            commands::synth_data(&cfg, &Paths { out, ..paths })?;
        }
        Command::PretrainVlr => {
            let eval = commands::pretrain_vlr_cmd(&cfg, &paths)?;
            println!(
                "vlr: match accuracy {:.4}, disease auc {:.4}",
                eval.match_accuracy, eval.disease_auc
            );
        }
        Command::PretrainLlr => {
            let acc = commands::pretrain_llr_cmd(&cfg, &paths)?;
            println!("llr: pair accuracy {acc:.4}");
        }
        Command::Train => {
            let history = commands::train_cmd(&cfg, &paths, variant)?;
            if let Some(last) = history.last() {
                println!("decoder[{variant}]: final loss {last:.4}");
            }
        }
        Command::Generate => {
            let generations = commands::generate_cmd(&cfg, &paths, variant)?;
            println!("generated {} reports", generations.len());
        }
        Command::Evaluate => print!("{}", commands::evaluate_cmd(&cfg, &paths, variant)?),
        Command::Ablate => print!("{}", commands::ablate_cmd(&cfg, &paths)?),
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
