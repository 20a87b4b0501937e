//! Label-free training on twin pairs.
//!
//! Each step scores four masked queries per pair, averages the pair losses
//! over the batch, backpropagates through the candidate probabilities into
//! the encoder and applies one Adam update. Labels are never read.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{validate, Corpus};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossHyper};
use crate::mlm::{ModelParams, Real, Tape};
use crate::optim::{Adam, AdamConfig};
use crate::scorer::{pair_prob_from_log_probs, pair_queries, MaskedQuery, PairProb};
use crate::tokenizer::Vocab;

/// Learning rate used for pretrained-scale fine-tuning; desk-scale configs
/// override it.
pub const REFERENCE_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossHyper,
    pub seed: u64,
    /// Epochs between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_pairs: 4,
            learning_rate: REFERENCE_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossHyper::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Train("epochs must be >= 1".into()));
        }
        if self.batch_pairs < 1 {
            return Err(Error::Train("batch_pairs must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Train("learning_rate must be > 0".into()));
        }
        self.loss.validate().map_err(Error::Train)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Batch means of the per-pair loss components.
    pub mex: f64,
    pub cm: f64,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Means over all pairs seen in the epoch, before their update.
    pub mean_mex: f64,
    pub mean_cm: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochSummary),
}

impl TrainLog {
    /// Step records, then one summary line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .steps
            .iter()
            .map(LogLine::Step)
            .chain(self.epochs.iter().map(LogLine::Epoch));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("log lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn final_epoch(&self) -> Option<&EpochSummary> {
        self.epochs.last()
    }
}

/// Mean loss components over a batch of pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub mex: f64,
    pub cm: f64,
    pub total: f64,
    pub pairs: usize,
}

fn forward_batch<T: Real>(
    model: &ModelParams<T>,
    batch: &[&[MaskedQuery; 4]],
) -> Result<(Vec<Tape<T>>, Vec<PairProb>)> {
    let queries: Vec<&MaskedQuery> = batch.iter().flat_map(|qs| qs.iter()).collect();
    let tapes: Vec<Tape<T>> = queries
        .par_iter()
        .map(|q| model.forward_tape(q))
        .collect::<Result<_>>()?;
    let probs = batch
        .iter()
        .zip(tapes.chunks(4))
        .map(|(qs, ts)| {
            let lp: Vec<Vec<Vec<f64>>> = ts
                .iter()
                .map(|t| {
                    t.log_probs()
                        .iter()
                        .map(|v| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
                        .collect()
                })
                .collect();
            pair_prob_from_log_probs(&qs[..], &lp)
        })
        .collect::<Result<_>>()?;
    Ok((tapes, probs))
}

/// Mean pair loss of a batch, forward only.
pub fn batch_loss<T: Real>(
    model: &ModelParams<T>,
    batch: &[&[MaskedQuery; 4]],
    hyper: &LossHyper,
) -> Result<BatchLoss> {
    let (_, probs) = forward_batch(model, batch)?;
    Ok(mean_loss(&probs, hyper))
}

fn mean_loss(probs: &[PairProb], hyper: &LossHyper) -> BatchLoss {
    let n = probs.len() as f64;
    let (mut mex, mut cm, mut total) = (0.0, 0.0, 0.0);
    for p in probs {
        let l = total_loss(p, hyper);
        mex += l.mex;
        cm += l.cm;
        total += l.total;
    }
    BatchLoss {
        mex: mex / n,
        cm: cm / n,
        total: total / n,
        pairs: probs.len(),
    }
}

/// Mean pair loss of a batch and its gradient w.r.t. every model parameter.
///
/// The loss reaches the model only through `p = exp(mean_m log p_m)`, so the
/// upstream gradient on each selected log-probability is `∂L/∂p · p / k`.
pub fn batch_loss_and_grad<T: Real>(
    model: &ModelParams<T>,
    batch: &[&[MaskedQuery; 4]],
    hyper: &LossHyper,
) -> Result<(BatchLoss, ModelParams<T>)> {
    let (tapes, probs) = forward_batch(model, batch)?;
    let loss = mean_loss(&probs, hyper);
    let scale = 1.0 / batch.len() as f64;

    let mut upstream = Vec::with_capacity(tapes.len());
    for (qs, p) in batch.iter().zip(&probs) {
        let g = total_loss(p, hyper).grad;
        for (n, q) in qs.iter().enumerate() {
            let (i, j) = (n / 2, n % 2);
            let u = g[i][j] * scale * p.p[i][j] / q.k() as f64;
            upstream.push(vec![T::lit(u); q.k()]);
        }
    }
    let queries: Vec<&MaskedQuery> = batch.iter().flat_map(|qs| qs.iter()).collect();

    let parts: Vec<ModelParams<T>> = tapes
        .par_iter()
        .zip(queries.par_iter())
        .zip(upstream.par_iter())
        .map(|((tape, q), u)| {
            let mut g = model.zeros_like();
            model.backward_tape(tape, &q.candidate_ids, u, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = model.zeros_like();
    for g in &parts {
        grads.add_scaled(g, T::one());
    }
    Ok((loss, grads))
}

/// Builds the four queries of every pair. Fails on the first pair that does
/// not fit the model.
pub fn corpus_queries(
    corpus: &Corpus,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<[MaskedQuery; 4]>> {
    corpus
        .pairs
        .iter()
        .map(|p| {
            pair_queries(p, vocab, max_len).map_err(|e| Error::Train(format!("pair {}: {e}", p.id)))
        })
        .collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> StdRng {
    StdRng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    model: ModelParams<f32>,
    vocab: &Vocab,
) -> Result<(ModelParams<f32>, TrainLog)> {
    train_with(config, corpus, model, vocab, |_, _| Ok(()))
}

/// [`train`] with a callback after every epoch (1-based epoch number).
pub fn train_with<F>(
    config: &TrainConfig,
    corpus: &Corpus,
    mut model: ModelParams<f32>,
    vocab: &Vocab,
    mut on_epoch: F,
) -> Result<(ModelParams<f32>, TrainLog)>
where
    F: FnMut(usize, &ModelParams<f32>) -> Result<()>,
{
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let report = validate(corpus);
    if let Some(v) = report.violations.first() {
        return Err(Error::Train(format!(
            "invalid corpus: pair {}: {}",
            v.pair_id, v.reason
        )));
    }
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Train(format!(
            "model vocab size {} != vocabulary length {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    let queries = corpus_queries(corpus, vocab, model.config.max_len)?;

    let mut adam = Adam::new(&model, config.adam());
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, epoch));
        let (mut mex, mut cm, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_pairs) {
            let batch: Vec<&[MaskedQuery; 4]> = chunk.iter().map(|&i| &queries[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&model, &batch, &config.loss)?;
            adam.step(&mut model, &grads)?;
            if !model.all_finite() {
                return Err(Error::Train(format!(
                    "non-finite parameters after step {step}"
                )));
            }
            let n = chunk.len() as f64;
            mex += loss.mex * n;
            cm += loss.cm * n;
            total += loss.total * n;
            log.steps.push(StepRecord {
                epoch,
                step,
                mex: loss.mex,
                cm: loss.cm,
                total: loss.total,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        let n = queries.len() as f64;
        log.epochs.push(EpochSummary {
            epoch,
            mean_mex: mex / n,
            mean_cm: cm / n,
            mean_total: total / n,
        });
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlm::{init_model, ModelConfig};
    use crate::synth::synth_generate;
    use crate::tokenizer::build_vocab;

    fn tiny(vocab: &Vocab) -> ModelParams<f32> {
        let mut c = ModelConfig::new(vocab.len(), 3);
        c.dim = 16;
        c.n_heads = 2;
        c.ff_dim = 32;
        c.n_layers = 1;
        init_model(&c).unwrap()
    }

    #[test]
    fn empty_corpus_rejected() {
        let corpus = synth_generate(1, 4, 8);
        let vocab = build_vocab(&corpus, 1).unwrap();
        let empty = Corpus::new("e", vec![]);
        assert!(train(&TrainConfig::default(), &empty, tiny(&vocab), &vocab).is_err());
    }

    #[test]
    fn one_pair_one_epoch_is_one_step() {
        let corpus = synth_generate(1, 1, 8);
        let vocab = build_vocab(&corpus, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let before = tiny(&vocab);
        let (after, log) = train(&cfg, &corpus, before.clone(), &vocab).unwrap();
        assert_eq!(log.steps.len(), 1);
        assert_eq!(log.epochs.len(), 1);
        assert_ne!(after, before);
    }

    #[test]
    fn partial_batches_are_kept() {
        let corpus = synth_generate(1, 10, 8);
        let vocab = build_vocab(&corpus, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_pairs: 4,
            ..Default::default()
        };
        let (_, log) = train(&cfg, &corpus, tiny(&vocab), &vocab).unwrap();
        assert_eq!(log.steps.len(), 6);
        assert_eq!(log.steps.last().unwrap().step, 5);
    }

    #[test]
    fn components_add_up() {
        let corpus = synth_generate(2, 12, 8);
        let vocab = build_vocab(&corpus, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (_, log) = train(&cfg, &corpus, tiny(&vocab), &vocab).unwrap();
        for r in &log.steps {
            assert!((r.total - (r.mex + r.cm)).abs() <= 1e-6);
        }
        let no_cm = TrainConfig {
            loss: LossHyper {
                cm_enabled: false,
                ..cfg.loss
            },
            ..cfg
        };
        let (_, log) = train(&no_cm, &corpus, tiny(&vocab), &vocab).unwrap();
        assert!(log.steps.iter().all(|r| r.cm == 0.0 && r.total == r.mex));
    }

    #[test]
    fn labels_do_not_matter() {
        let corpus = synth_generate(5, 12, 8);
        let vocab = build_vocab(&corpus, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (a, _) = train(&cfg, &corpus, tiny(&vocab), &vocab).unwrap();
        let (b, _) = train(&cfg, &corpus.without_labels(), tiny(&vocab), &vocab).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_depends_on_seed_and_epoch() {
        let mut a: Vec<usize> = (0..20).collect();
        let mut b = a.clone();
        let mut c = a.clone();
        a.shuffle(&mut epoch_rng(1, 1));
        b.shuffle(&mut epoch_rng(1, 2));
        c.shuffle(&mut epoch_rng(1, 1));
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn log_lines_are_tagged() {
        let log = TrainLog {
            steps: vec![StepRecord {
                epoch: 1,
                step: 0,
                mex: -1.0,
                cm: -0.5,
                total: -1.5,
                wall_ms: 2.0,
            }],
            epochs: vec![EpochSummary {
                epoch: 1,
                mean_mex: -1.0,
                mean_cm: -0.5,
                mean_total: -1.5,
            }],
        };
        let text = log.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(
            lines[0].starts_with(r#"{"kind":"step","epoch":1"#),
            "{}",
            lines[0]
        );
        assert!(lines[1].starts_with(r#"{"kind":"epoch""#), "{}", lines[1]);
    }

    #[test]
    fn invalid_config_rejected() {
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_pairs: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
