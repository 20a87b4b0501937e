//! Pronoun resolution and accuracy/consistency reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SchemaSentence};
use crate::error::{Error, Result};
use crate::mlm::ScorerBackend;
use crate::scorer::{
    build_masked_query, pair_prob_from_log_probs, pair_queries, probability_from_log_probs,
    MaskedQuery,
};
use crate::tokenizer::Vocab;

/// Pairs scored per backend call during [`evaluate`].
const PAIRS_PER_CALL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Resolution {
    pub index: usize,
    /// Both candidates scored exactly equal; `index` is then 0.
    pub tie: bool,
    pub probs: [f64; 2],
}

impl Resolution {
    pub fn from_probs(probs: [f64; 2]) -> Self {
        let tie = probs[0] == probs[1];
        Resolution {
            index: usize::from(probs[1] > probs[0]),
            tie,
            probs,
        }
    }
}

pub fn resolve(
    backend: &dyn ScorerBackend,
    sentence: &SchemaSentence,
    candidates: &[String; 2],
    vocab: &Vocab,
) -> Result<Resolution> {
    let queries = [
        build_masked_query(sentence, &candidates[0], vocab, backend.max_len())?,
        build_masked_query(sentence, &candidates[1], vocab, backend.max_len())?,
    ];
    let out = backend.score(&queries)?;
    if out.len() != 2 {
        return Err(Error::Scorer(format!(
            "expected 2 results, got {}",
            out.len()
        )));
    }
    Ok(Resolution::from_probs([
        probability_from_log_probs(&out[0], &queries[0].candidate_ids)?,
        probability_from_log_probs(&out[1], &queries[1].candidate_ids)?,
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_sentences: usize,
    pub n_pairs: usize,
    /// Fraction of sentences whose gold candidate was chosen.
    pub accuracy: f64,
    /// Fraction of pairs with both sentences resolved correctly.
    pub consistency: f64,
    pub tie_count: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Scores every pair of a fully labeled corpus. Counts are independent of
/// pair order.
pub fn evaluate(backend: &dyn ScorerBackend, corpus: &Corpus, vocab: &Vocab) -> Result<EvalReport> {
    if !corpus.is_labeled() {
        return Err(Error::Unlabeled);
    }
    let mut correct = 0usize;
    let mut both = 0usize;
    let mut ties = 0usize;
    for chunk in corpus.pairs.chunks(PAIRS_PER_CALL) {
        let mut queries: Vec<MaskedQuery> = Vec::with_capacity(4 * chunk.len());
        for pair in chunk {
            queries.extend(pair_queries(pair, vocab, backend.max_len())?);
        }
        let out = backend.score(&queries)?;
        if out.len() != queries.len() {
            return Err(Error::Scorer(format!(
                "expected {} results, got {}",
                queries.len(),
                out.len()
            )));
        }
        for ((pair, qs), lps) in chunk.iter().zip(queries.chunks(4)).zip(out.chunks(4)) {
            let pp = pair_prob_from_log_probs(qs, lps)?;
            let mut pair_correct = 0;
            for (j, sentence) in pair.sentences.iter().enumerate() {
                let r = Resolution::from_probs([pp.p[0][j], pp.p[1][j]]);
                ties += usize::from(r.tie);
                if sentence.label == Some(r.index as u8) {
                    pair_correct += 1;
                }
            }
            correct += pair_correct;
            both += usize::from(pair_correct == 2);
        }
    }
    let n_pairs = corpus.len();
    let n_sentences = 2 * n_pairs;
    Ok(EvalReport {
        dataset: corpus.name.clone(),
        n_sentences,
        n_pairs,
        accuracy: correct as f64 / n_sentences as f64,
        consistency: both as f64 / n_pairs as f64,
        tie_count: ties,
    })
}
