use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cssr::corpus::{load_corpus, save_corpus, validate};
use cssr::tokenizer::{build_vocab, save_vocab};
use cssr::CmVariant;
use cssr_cli::run::{self, CmdResult, Failure};
use cssr_cli::RunConfig;

#[derive(Parser)]
#[command(
    name = "cssr",
    version,
    about = "Label-free pronoun resolution on twin-sentence pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus file and print a validation report
    Validate { corpus: PathBuf },
    /// Generate a synthetic twin-pair corpus
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        pairs: usize,
        /// Number of templates to draw from (capped at the built-in count)
        #[arg(long, default_value_t = cssr::synth::template_count())]
        templates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary file from a corpus
    BuildVocab {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop tokens seen fewer times than this
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    /// Train a model without labels and write a checkpoint and a training log
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train on the MEx term only
        #[arg(long)]
        no_cm: bool,
        /// Contrastive margin form: verbatim or hinge
        #[arg(long)]
        cm_variant: Option<CmVariant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Seed for batch order
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training log (JSON lines)
        #[arg(long)]
        log: Option<PathBuf>,
        /// Held-out evaluation report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or an external scorer on a labeled corpus
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Shell command speaking the JSON-lines scorer protocol
        #[arg(long)]
        external_scorer: Option<String>,
        /// Vocabulary file; required with --external-scorer
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Report file; standard output if omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score both candidates of one sentence
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sentence with a single '_' placeholder
        #[arg(long)]
        sentence: String,
        /// Two candidates separated by '|'
        #[arg(long)]
        candidates: String,
    },
    /// Verify loss and model gradients against finite differences
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        /// Random points for the loss check
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Parameter coordinates for the model check
        #[arg(long, default_value_t = 500)]
        coordinates: usize,
    },
}

fn load_config(path: &PathBuf) -> CmdResult<RunConfig> {
    RunConfig::load(path).map_err(Failure::Usage)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn execute(cmd: Command) -> CmdResult {
    match cmd {
        Command::Validate { corpus } => {
            let report = validate(&load_corpus(&corpus)?);
            println!("{}", json(&report));
            if report.is_clean() {
                Ok(())
            } else {
                Err(Failure::Data(format!(
                    "{} violation(s) in {}",
                    report.violations.len(),
                    corpus.display()
                )))
            }
        }
        Command::Synth {
            seed,
            pairs,
            templates,
            out,
        } => {
            let corpus = cssr::synth_generate(seed, pairs, templates);
            save_corpus(&corpus, &out)?;
            Ok(())
        }
        Command::BuildVocab {
            corpus,
            out,
            min_freq,
        } => {
            let v = build_vocab(&load_corpus(&corpus)?, min_freq)?;
            save_vocab(&v, &out)?;
            Ok(())
        }
        Command::Train {
            config,
            no_cm,
            cm_variant,
            epochs,
            learning_rate,
            seed,
            checkpoint,
            log,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if no_cm {
                cfg.train.loss.cm_enabled = false;
            }
            if let Some(v) = cm_variant {
                cfg.train.loss.cm_variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.paths.checkpoint = checkpoint.or(cfg.paths.checkpoint);
            cfg.paths.log = log.or(cfg.paths.log);
            cfg.paths.output = out.or(cfg.paths.output);
            if cfg.paths.checkpoint.is_none() {
                return Err(Failure::Usage(
                    "no checkpoint path in config or flags".into(),
                ));
            }
            let outcome = run::run_training(&cfg)?;
            if let Some(last) = outcome.log.final_epoch() {
                eprintln!(
                    "epoch {}: mex {:.4} cm {:.4} total {:.4}",
                    last.epoch, last.mean_mex, last.mean_cm, last.mean_total
                );
            }
            if let Some(r) = &outcome.heldout {
                if cfg.paths.output.is_none() {
                    println!("{}", r.to_json());
                }
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            corpus,
            external_scorer,
            vocab,
            out,
        } => {
            let (backend, v) = run::open_backend(
                checkpoint.as_deref(),
                external_scorer.as_deref(),
                vocab.as_deref(),
            )?;
            let report = run::run_eval(backend.as_dyn(), &load_corpus(&corpus)?, &v)?;
            run::write_or_print(&report.to_json(), out.as_deref())
        }
        Command::Score {
            checkpoint,
            sentence,
            candidates,
        } => {
            let (backend, v) = run::open_backend(Some(&checkpoint), None, None)?;
            let out = run::run_score(backend.as_dyn(), &v, &sentence, &candidates)?;
            println!("{}", json(&out));
            Ok(())
        }
        Command::GradCheck {
            config,
            trials,
            coordinates,
        } => {
            let cfg = load_config(&config)?;
            let out = run::run_grad_check(&cfg, trials, coordinates)?;
            println!("{}", json(&out));
            if out.passed {
                Ok(())
            } else {
                Err(Failure::Check("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
