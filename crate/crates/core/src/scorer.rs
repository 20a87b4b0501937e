//! Masked queries and candidate probabilities.
//!
//! A candidate of `k` tokens is scored by replacing the placeholder with `k`
//! mask tokens; its probability is the geometric mean of the token
//! probabilities at those positions, `exp(mean_m log p_m(c_m))`.

use serde::Serialize;

use crate::corpus::{SchemaSentence, TwinPair};
use crate::error::{Error, Result};
use crate::mlm::{MaskLogProbs, ScorerBackend};
use crate::tokenizer::{encode, Vocab, CLS, MASK, SEP};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedQuery {
    /// `[CLS] … [MASK]×k … [SEP]`
    pub ids: Vec<u32>,
    /// The `k` consecutive positions holding the masks.
    pub mask_positions: Vec<usize>,
    /// The candidate's `k` token ids, aligned with `mask_positions`.
    pub candidate_ids: Vec<u32>,
}

impl MaskedQuery {
    pub fn k(&self) -> usize {
        self.mask_positions.len()
    }
}

/// `p[i][j]`: probability of candidate `i` in sentence `j`. Rows and columns
/// are independent mask-fill likelihoods and need not sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairProb {
    pub p: [[f64; 2]; 2],
}

impl PairProb {
    pub fn new(p: [[f64; 2]; 2]) -> Self {
        PairProb { p }
    }
}

/// Replaces the placeholder with one mask per candidate token and wraps the
/// sequence in `[CLS]`/`[SEP]`.
pub fn build_masked_query(
    sentence: &SchemaSentence,
    candidate: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<MaskedQuery> {
    let (before, after) = sentence.split_placeholder().ok_or_else(|| {
        Error::Query(format!(
            "sentence needs exactly one placeholder: {:?}",
            sentence.text
        ))
    })?;
    let candidate_ids = encode(candidate, vocab)?;
    if candidate_ids.is_empty() {
        return Err(Error::Query(format!(
            "candidate {candidate:?} has no tokens"
        )));
    }
    let before = encode(before, vocab)?;
    let after = encode(after, vocab)?;
    let k = candidate_ids.len();

    let mut ids = Vec::with_capacity(before.len() + k + after.len() + 2);
    ids.push(CLS);
    ids.extend(before);
    let start = ids.len();
    ids.extend(std::iter::repeat_n(MASK, k));
    ids.extend(after);
    ids.push(SEP);
    if ids.len() > max_len {
        return Err(Error::Query(format!(
            "query length {} exceeds max_len {max_len}",
            ids.len()
        )));
    }
    Ok(MaskedQuery {
        ids,
        mask_positions: (start..start + k).collect(),
        candidate_ids,
    })
}

/// `exp` of the mean log-probability of the candidate tokens.
pub fn probability_from_log_probs(log_probs: &[Vec<f64>], candidate_ids: &[u32]) -> Result<f64> {
    if log_probs.len() != candidate_ids.len() || candidate_ids.is_empty() {
        return Err(Error::Scorer(format!(
            "{} log-prob vectors for {} candidate tokens",
            log_probs.len(),
            candidate_ids.len()
        )));
    }
    let mut sum = 0.0;
    for (lp, &c) in log_probs.iter().zip(candidate_ids) {
        sum += *lp
            .get(c as usize)
            .ok_or_else(|| Error::Scorer(format!("token id {c} outside log-prob vector")))?;
    }
    Ok((sum / candidate_ids.len() as f64).exp())
}

pub fn candidate_probability(backend: &dyn ScorerBackend, query: &MaskedQuery) -> Result<f64> {
    let out = backend.score(std::slice::from_ref(query))?;
    let lp = out
        .first()
        .ok_or_else(|| Error::Scorer("backend returned no result".into()))?;
    probability_from_log_probs(lp, &query.candidate_ids)
}

/// The four queries of a pair in `[candidate][sentence]` order:
/// `(0,0), (0,1), (1,0), (1,1)`.
pub fn pair_queries(pair: &TwinPair, vocab: &Vocab, max_len: usize) -> Result<[MaskedQuery; 4]> {
    let q = |i: usize, j: usize| {
        build_masked_query(&pair.sentences[j], &pair.candidates[i], vocab, max_len)
    };
    Ok([q(0, 0)?, q(0, 1)?, q(1, 0)?, q(1, 1)?])
}

/// Assembles a [`PairProb`] from the log-probabilities of the four
/// [`pair_queries`].
pub fn pair_prob_from_log_probs(
    queries: &[MaskedQuery],
    log_probs: &[MaskLogProbs],
) -> Result<PairProb> {
    if queries.len() != 4 || log_probs.len() != 4 {
        return Err(Error::Scorer(format!(
            "expected 4 queries and results, got {} and {}",
            queries.len(),
            log_probs.len()
        )));
    }
    let mut p = [[0.0; 2]; 2];
    for (n, (q, lp)) in queries.iter().zip(log_probs).enumerate() {
        p[n / 2][n % 2] = probability_from_log_probs(lp, &q.candidate_ids)?;
    }
    Ok(PairProb { p })
}

/// `p[i][j]` for both candidates in both sentences, from one backend call of
/// four queries.
pub fn pair_probabilities(
    backend: &dyn ScorerBackend,
    pair: &TwinPair,
    vocab: &Vocab,
) -> Result<PairProb> {
    let queries = pair_queries(pair, vocab, backend.max_len())?;
    let out = backend.score(&queries)?;
    pair_prob_from_log_probs(&queries, &out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tokenizer::Vocab;
    use proptest::prelude::*;

    pub(crate) fn vocab(words: &[&str]) -> Vocab {
        Vocab::from_tokens(
            crate::tokenizer::SPECIALS
                .iter()
                .chain(words)
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    /// Log-prob vectors are a fixed function of (mask index, vocab id, sum of
    /// the non-mask ids) so different sentences get different scores.
    pub(crate) struct HashStub {
        pub v: usize,
    }

    impl HashStub {
        pub(crate) fn logits(&self, q: &MaskedQuery, m: usize) -> Vec<f64> {
            let ctx: u32 = q.ids.iter().filter(|&&i| i != MASK).sum();
            (0..self.v)
                .map(|t| (((t as u32 * 31 + ctx * 7 + m as u32 * 13) % 17) as f64) / 5.0)
                .collect()
        }
    }

    pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    impl ScorerBackend for HashStub {
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn score(&self, queries: &[MaskedQuery]) -> Result<Vec<MaskLogProbs>> {
            Ok(queries
                .iter()
                .map(|q| {
                    (0..q.k())
                        .map(|m| log_softmax(&self.logits(q, m)))
                        .collect()
                })
                .collect())
        }
    }

    /// Returns the same vectors for every query.
    struct Fixed(Vec<Vec<f64>>);

    impl ScorerBackend for Fixed {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn score(&self, queries: &[MaskedQuery]) -> Result<Vec<MaskLogProbs>> {
            Ok(queries.iter().map(|q| self.0[..q.k()].to_vec()).collect())
        }
    }

    fn trophy_vocab() -> Vocab {
        vocab(&[
            "the", "trophy", "doesn", "'", "t", "fit", "in", "suitcase", "because", "is", "too",
            "small", "big",
        ])
    }

    #[test]
    fn multi_token_candidate_gets_consecutive_masks() {
        let v = trophy_vocab();
        let s = SchemaSentence::new(
            "The trophy doesn't fit in the suitcase because _ is too small",
            Some(1),
        );
        let q = build_masked_query(&s, "the suitcase", &v, 64).unwrap();
        assert_eq!(q.k(), 2);
        assert_eq!(q.mask_positions, [11, 12]);
        assert!(q.mask_positions.iter().all(|&m| q.ids[m] == MASK));
        assert_eq!(q.ids.iter().filter(|&&i| i == MASK).count(), 2);
        assert_eq!(q.ids[0], CLS);
        assert_eq!(*q.ids.last().unwrap(), SEP);
        assert_eq!(q.candidate_ids, [v.lookup("the"), v.lookup("suitcase")]);

        let single = build_masked_query(&s, "trophy", &v, 64).unwrap();
        assert_eq!(single.k(), 1);
    }

    #[test]
    fn bad_candidates_and_lengths_rejected() {
        let v = trophy_vocab();
        let s = SchemaSentence::new("_ is too big", None);
        assert!(build_masked_query(&s, "", &v, 64).is_err());
        assert!(build_masked_query(&s, "  ", &v, 64).is_err());
        assert!(build_masked_query(&s, "the trophy", &v, 6).is_err());
        assert!(build_masked_query(&s, "the trophy", &v, 7).is_ok());
        let none = SchemaSentence::new("no placeholder", None);
        assert!(build_masked_query(&none, "trophy", &v, 64).is_err());
    }

    #[test]
    fn probability_arithmetic() {
        let v = 4;
        let mut half = vec![f64::NEG_INFINITY; v];
        half[2] = 0.5f64.ln();
        assert_eq!(probability_from_log_probs(&[half], &[2]).unwrap(), 0.5);

        let mut a = vec![-5.0; v];
        let mut b = vec![-5.0; v];
        a[1] = -1.0;
        b[3] = -3.0;
        let p = probability_from_log_probs(&[a, b], &[1, 3]).unwrap();
        assert!((p - (-2.0f64).exp()).abs() < 1e-15);
        assert!((p - 0.135_335_283_236_612_7).abs() < 1e-15);
    }

    #[test]
    fn uniform_backend_gives_one_over_v() {
        let v = trophy_vocab();
        let n = v.len();
        let uniform = Fixed(vec![vec![(1.0 / n as f64).ln(); n]; 4]);
        let s = SchemaSentence::new("_ is too big", None);
        let q = build_masked_query(&s, "trophy", &v, 64).unwrap();
        let p = candidate_probability(&uniform, &q).unwrap();
        // exp(ln x) round-trips to within a few ulps
        assert!(
            (p - 1.0 / n as f64).abs() <= 4.0 * f64::EPSILON / n as f64,
            "{p}"
        );
    }

    fn pair() -> TwinPair {
        TwinPair {
            id: "t".into(),
            sentences: [
                SchemaSentence::new(
                    "the trophy doesn't fit in the suitcase because _ is too big",
                    Some(0),
                ),
                SchemaSentence::new(
                    "the trophy doesn't fit in the suitcase because _ is too small",
                    Some(1),
                ),
            ],
            candidates: ["the trophy".into(), "suitcase".into()],
        }
    }

    #[test]
    fn symmetric_backend_gives_equal_columns() {
        let v = trophy_vocab();
        let n = v.len();
        let fixed = Fixed(vec![
            log_softmax(
                &(0..n).map(|i| i as f64 * 0.1).collect::<Vec<_>>()
            );
            4
        ]);
        let pp = pair_probabilities(&fixed, &pair(), &v).unwrap();
        assert_eq!(pp.p[0][0], pp.p[0][1]);
        assert_eq!(pp.p[1][0], pp.p[1][1]);
        assert!(pp.p.iter().flatten().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn pair_matrix_matches_hand_computation() {
        let v = trophy_vocab();
        let stub = HashStub { v: v.len() };
        let pr = pair();
        let pp = pair_probabilities(&stub, &pr, &v).unwrap();
        // recompute each entry directly from the stub's logits
        for i in 0..2 {
            for j in 0..2 {
                let q = build_masked_query(&pr.sentences[j], &pr.candidates[i], &v, 64).unwrap();
                let mut sum = 0.0;
                for (m, &c) in q.candidate_ids.iter().enumerate() {
                    let z = stub.logits(&q, m);
                    let z_max = z.iter().cloned().fold(f64::MIN, f64::max);
                    let norm: f64 = z.iter().map(|x| (x - z_max).exp()).sum();
                    sum += (z[c as usize] - z_max).exp().ln() - norm.ln();
                }
                let expected = (sum / q.k() as f64).exp();
                assert!((pp.p[i][j] - expected).abs() < 1e-9, "p[{i}][{j}]");
            }
        }
    }

    #[test]
    fn swapping_candidates_swaps_rows() {
        let v = trophy_vocab();
        let stub = HashStub { v: v.len() };
        let a = pair();
        let mut b = a.clone();
        b.candidates.swap(0, 1);
        let pa = pair_probabilities(&stub, &a, &v).unwrap();
        let pb = pair_probabilities(&stub, &b, &v).unwrap();
        assert_eq!(pa.p[0], pb.p[1]);
        assert_eq!(pa.p[1], pb.p[0]);
    }

    proptest! {
        #[test]
        fn probability_in_unit_interval(lps in proptest::collection::vec(-30.0f64..0.0, 1..5)) {
            let vecs: Vec<Vec<f64>> = lps.iter().map(|&x| vec![x; 3]).collect();
            let ids = vec![1u32; vecs.len()];
            let p = probability_from_log_probs(&vecs, &ids).unwrap();
            prop_assert!(p > 0.0 && p <= 1.0);
        }
    }
}
