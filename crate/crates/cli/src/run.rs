//! Subcommand implementations, independent of argument parsing.

use std::path::Path;

use cssr::eval::{evaluate, resolve, EvalReport, Resolution};
use cssr::gradcheck::{loss_grad_check, model_grad_check, LossCheckReport, ModelCheckReport};
use cssr::mlm::{
    init_model, load_checkpoint, save_checkpoint, ExternalScorer, ModelParams, ScorerBackend,
};
use cssr::tokenizer::{build_vocab, load_vocab, save_vocab, Vocab};
use cssr::{Corpus, SchemaSentence, TrainLog};
use serde::Serialize;

use crate::config::RunConfig;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration (exit 1).
    Usage(String),
    /// Invalid or unreadable data (exit 2).
    Data(String),
    /// A numerical verification did not pass (exit 3).
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

impl From<cssr::Error> for Failure {
    fn from(e: cssr::Error) -> Self {
        match e {
            cssr::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

pub fn write_or_print(text: &str, out: Option<&Path>) -> CmdResult {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n"))
            .map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn ensure_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Data(format!("{}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub vocab: Vocab,
    pub log: TrainLog,
    pub heldout: Option<EvalReport>,
    /// Held-out report of the model before its first update.
    pub untrained: Option<EvalReport>,
}

/// Builds the vocabulary and model, trains, and writes whatever outputs the
/// config names.
pub fn run_training(cfg: &RunConfig) -> CmdResult<TrainOutcome> {
    let (corpus, heldout) = cfg.corpora()?;
    let vocab = match &cfg.paths.vocab {
        Some(p) if p.exists() => load_vocab(p)?,
        other => {
            let v = build_vocab(&corpus, 1)?;
            if let Some(p) = other {
                ensure_parent(p)?;
                save_vocab(&v, p)?;
            }
            v
        }
    };
    let model = init_model::<f32>(&cfg.model.config(vocab.len()))?;
    let untrained = heldout
        .as_ref()
        .map(|h| evaluate(&model, h, &vocab))
        .transpose()?;

    let checkpoint = cfg.paths.checkpoint.clone();
    if let Some(p) = &checkpoint {
        ensure_parent(p)?;
    }
    let every = cfg.train.checkpoint_every;
    let (model, log) =
        cssr::train_with(
            &cfg.train,
            &corpus,
            model,
            &vocab,
            |epoch, m| match &checkpoint {
                Some(p) if every > 0 && epoch % every == 0 && epoch < cfg.train.epochs => {
                    save_checkpoint(epoch_path(p, epoch), m, &vocab)
                }
                _ => Ok(()),
            },
        )?;

    if let Some(p) = &checkpoint {
        save_checkpoint(p, &model, &vocab)?;
    }
    if let Some(p) = &cfg.paths.log {
        ensure_parent(p)?;
        log.write_jsonl(p)?;
    }
    let report = heldout
        .as_ref()
        .map(|h| evaluate(&model, h, &vocab))
        .transpose()?;
    if let (Some(r), Some(p)) = (&report, &cfg.paths.output) {
        ensure_parent(p)?;
        r.write_json(p)?;
    }
    Ok(TrainOutcome {
        model,
        vocab,
        log,
        heldout: report,
        untrained,
    })
}

/// `model.cssr` → `model.epoch-5.cssr`
pub fn epoch_path(path: &Path, epoch: usize) -> std::path::PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let name = match path.extension().and_then(|s| s.to_str()) {
        Some(ext) => format!("{stem}.epoch-{epoch}.{ext}"),
        None => format!("{stem}.epoch-{epoch}"),
    };
    path.with_file_name(name)
}

pub enum Backend {
    Model(ModelParams<f32>),
    External(ExternalScorer),
}

impl Backend {
    pub fn as_dyn(&self) -> &dyn ScorerBackend {
        match self {
            Backend::Model(m) => m,
            Backend::External(e) => e,
        }
    }
}

/// A checkpoint (which carries its vocabulary) or an external scorer, which
/// needs one supplied.
pub fn open_backend(
    checkpoint: Option<&Path>,
    external: Option<&str>,
    vocab: Option<&Path>,
) -> CmdResult<(Backend, Vocab)> {
    match (checkpoint, external) {
        (Some(c), None) => {
            let ck = load_checkpoint(c)?;
            if let Some(v) = vocab {
                if load_vocab(v)? != ck.vocab {
                    return Err(Failure::Data(format!(
                        "{} does not match the vocabulary stored in {}",
                        v.display(),
                        c.display()
                    )));
                }
            }
            Ok((Backend::Model(ck.params), ck.vocab))
        }
        (None, Some(cmd)) => {
            let v =
                vocab.ok_or_else(|| Failure::Usage("--external-scorer needs --vocab".into()))?;
            let v = load_vocab(v)?;
            let scorer = ExternalScorer::spawn(cmd, v.clone(), cssr::mlm::DEFAULT_TIMEOUT)?;
            Ok((Backend::External(scorer), v))
        }
        (Some(_), Some(_)) => Err(Failure::Usage(
            "--checkpoint and --external-scorer are mutually exclusive".into(),
        )),
        (None, None) => Err(Failure::Usage(
            "one of --checkpoint or --external-scorer is required".into(),
        )),
    }
}

pub fn run_eval(
    backend: &dyn ScorerBackend,
    corpus: &Corpus,
    vocab: &Vocab,
) -> CmdResult<EvalReport> {
    Ok(evaluate(backend, corpus, vocab)?)
}

#[derive(Debug, Serialize)]
pub struct ScoreOutput {
    pub candidates: [String; 2],
    pub probabilities: [f64; 2],
    pub chosen: usize,
    pub tie: bool,
}

pub fn run_score(
    backend: &dyn ScorerBackend,
    vocab: &Vocab,
    sentence: &str,
    candidates: &str,
) -> CmdResult<ScoreOutput> {
    let parts: Vec<&str> = candidates.split('|').map(str::trim).collect();
    let [a, b] = parts[..] else {
        return Err(Failure::Usage(format!(
            "--candidates needs exactly two candidates separated by '|', got {candidates:?}"
        )));
    };
    let cands = [a.to_string(), b.to_string()];
    let s = SchemaSentence::new(sentence, None);
    let Resolution { index, tie, probs } = resolve(backend, &s, &cands, vocab)?;
    Ok(ScoreOutput {
        candidates: cands,
        probabilities: probs,
        chosen: index,
        tie,
    })
}

#[derive(Debug, Serialize)]
pub struct GradCheckOutput {
    pub loss: LossCheckReport,
    pub model: ModelCheckReport,
    pub passed: bool,
}

pub fn run_grad_check(
    cfg: &RunConfig,
    trials: usize,
    coordinates: usize,
) -> CmdResult<GradCheckOutput> {
    let loss = loss_grad_check(cfg.train.seed, trials, &cfg.train.loss);
    let model = model_grad_check(cfg.train.seed, coordinates, &cfg.train.loss)?;
    let passed = loss.passed && model.passed;
    Ok(GradCheckOutput {
        loss,
        model,
        passed,
    })
}
