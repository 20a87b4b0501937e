//! Scoring through an external process.
//!
//! Newline-delimited JSON over the peer's stdin/stdout:
//!
//! ```text
//! -> {"id": 7, "tokens": ["[CLS]", "the", "[MASK]", ...], "mask_positions": [2]}
//! <- {"id": 7, "log_probs": [[-3.1, -2.9, ...]]}
//! ```
//!
//! One inner array per mask position, each as long as the vocabulary.
//! Responses may come back in any order; every id must be answered once.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{MaskLogProbs, ScorerBackend};
use crate::error::{Error, Result};
use crate::scorer::MaskedQuery;
use crate::tokenizer::Vocab;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Tolerance on `Σ exp(log_prob) = 1` for each returned vector.
const NORMALIZATION_TOL: f64 = 1e-5;

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    tokens: Vec<&'a str>,
    mask_positions: &'a [usize],
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    log_probs: Vec<Vec<f64>>,
}

struct Connection {
    writer: Option<Box<dyn Write + Send>>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved peer exit on its own
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A non-differentiable [`ScorerBackend`] backed by a peer process. Requests
/// on one connection are serialized.
pub struct ExternalScorer {
    conn: Mutex<Connection>,
    vocab: Vocab,
    timeout: Duration,
}

impl ExternalScorer {
    /// Runs `command` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn(command: &str, vocab: Vocab, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Scorer(format!("failed to start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut scorer = Self::from_streams(stdin, BufReader::new(stdout), vocab, timeout);
        scorer.conn.get_mut().unwrap().child = Some(child);
        Ok(scorer)
    }

    /// Uses an already-connected pair of streams.
    pub fn from_streams<W, R>(writer: W, reader: R, vocab: Vocab, timeout: Duration) -> Self
    where
        W: Write + Send + 'static,
        R: BufRead + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        ExternalScorer {
            conn: Mutex::new(Connection {
                writer: Some(Box::new(writer)),
                lines: rx,
                next_id: 0,
                child: None,
            }),
            vocab,
            timeout,
        }
    }

    fn check_response(&self, id: u64, query: &MaskedQuery, log_probs: &[Vec<f64>]) -> Result<()> {
        let bad = |reason: String| Err(Error::Protocol { id, reason });
        if log_probs.len() != query.k() {
            return bad(format!(
                "{} log-prob vectors for {} mask positions",
                log_probs.len(),
                query.k()
            ));
        }
        for v in log_probs {
            if v.len() != self.vocab.len() {
                return bad(format!(
                    "log-prob vector of length {} (vocabulary has {})",
                    v.len(),
                    self.vocab.len()
                ));
            }
            if v.iter().any(|&x| x.is_nan() || x > 0.0) {
                return bad("log-probabilities must be <= 0".into());
            }
            let total: f64 = v.iter().map(|x| x.exp()).sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return bad(format!("probabilities sum to {total}"));
            }
        }
        Ok(())
    }
}

impl ScorerBackend for ExternalScorer {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn score(&self, queries: &[MaskedQuery]) -> Result<Vec<MaskLogProbs>> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Scorer("connection poisoned".into()))?;
        let first_id = conn.next_id;
        conn.next_id += queries.len() as u64;

        let mut payload = String::new();
        for (n, q) in queries.iter().enumerate() {
            let tokens = q
                .ids
                .iter()
                .map(|&id| {
                    self.vocab
                        .token(id)
                        .ok_or_else(|| Error::Query(format!("unknown token id {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let req = Request {
                id: first_id + n as u64,
                tokens,
                mask_positions: &q.mask_positions,
            };
            payload.push_str(&serde_json::to_string(&req).expect("request serializes"));
            payload.push('\n');
        }
        let writer = conn
            .writer
            .as_mut()
            .ok_or_else(|| Error::Scorer("connection closed".into()))?;
        writer
            .write_all(payload.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Protocol {
                id: first_id,
                reason: format!("write failed: {e}"),
            })?;

        let mut pending: HashMap<u64, usize> = (0..queries.len())
            .map(|n| (first_id + n as u64, n))
            .collect();
        let mut results: Vec<Option<MaskLogProbs>> = vec![None; queries.len()];
        while !pending.is_empty() {
            let oldest = *pending.keys().min().expect("non-empty");
            let line = match conn.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => {
                    return Err(Error::Protocol {
                        id: oldest,
                        reason: format!("read failed: {e}"),
                    })
                }
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout { id: oldest }),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Protocol {
                        id: oldest,
                        reason: "peer closed the connection".into(),
                    })
                }
            };
            let resp: Response = serde_json::from_str(&line).map_err(|e| {
                // name the request the line claims to answer when the id is readable
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(oldest);
                Error::Protocol {
                    id,
                    reason: format!("malformed response: {e}"),
                }
            })?;
            let Some(n) = pending.remove(&resp.id) else {
                return Err(Error::Protocol {
                    id: resp.id,
                    reason: format!(
                        "response id {} does not match any outstanding request ({first_id}..{})",
                        resp.id,
                        first_id + queries.len() as u64
                    ),
                });
            };
            self.check_response(resp.id, &queries[n], &resp.log_probs)?;
            results[n] = Some(resp.log_probs);
        }
        Ok(results
            .into_iter()
            .map(|r| r.expect("all answered"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::tests::vocab;
    use crate::tokenizer::{CLS, MASK, SEP};
    use serde_json::json;
    use std::io::pipe;

    fn query(k: usize) -> MaskedQuery {
        let mut ids = vec![CLS, 5];
        ids.extend(std::iter::repeat_n(MASK, k));
        ids.push(SEP);
        MaskedQuery {
            ids,
            mask_positions: (2..2 + k).collect(),
            candidate_ids: vec![6; k],
        }
    }

    /// Runs `peer` on the other end of an in-process connection. It receives
    /// each batch of parsed requests and returns the raw lines to send back.
    fn connect<F>(v: usize, batch: usize, peer: F) -> ExternalScorer
    where
        F: Fn(Vec<serde_json::Value>) -> Vec<String> + Send + 'static,
    {
        let (req_r, req_w) = pipe().unwrap();
        let (resp_r, mut resp_w) = pipe().unwrap();
        thread::spawn(move || {
            let mut reader = BufReader::new(req_r);
            let mut buf = Vec::new();
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 0 {
                buf.push(serde_json::from_str(&line).unwrap());
                line.clear();
                if buf.len() == batch {
                    for out in peer(std::mem::take(&mut buf)) {
                        if writeln!(resp_w, "{out}").is_err() {
                            return;
                        }
                    }
                }
            }
        });
        let words: Vec<String> = (0..v - 5).map(|i| format!("w{i}")).collect();
        let words: Vec<&str> = words.iter().map(String::as_str).collect();
        ExternalScorer::from_streams(
            req_w,
            BufReader::new(resp_r),
            vocab(&words),
            Duration::from_secs(5),
        )
    }

    fn uniform(v: usize, req: &serde_json::Value) -> String {
        let k = req["mask_positions"].as_array().unwrap().len();
        json!({"id": req["id"], "log_probs": vec![vec![(1.0 / v as f64).ln(); v]; k]}).to_string()
    }

    #[test]
    fn out_of_order_responses_are_matched_by_id() {
        let v = 9;
        let scorer = connect(v, 2, move |reqs| {
            reqs.iter().rev().map(|r| uniform(v, r)).collect()
        });
        let out = scorer.score(&[query(1), query(2)]).unwrap();
        assert_eq!(out[0].len(), 1);
        assert_eq!(out[1].len(), 2);
    }

    #[test]
    fn uniform_peer_gives_one_over_v() {
        let v = 9;
        let scorer = connect(v, 1, move |reqs| vec![uniform(v, &reqs[0])]);
        let p = crate::scorer::candidate_probability(&scorer, &query(1)).unwrap();
        assert!(
            (p - 1.0 / v as f64).abs() <= 4.0 * f64::EPSILON / v as f64,
            "{p}"
        );
    }

    #[test]
    fn malformed_line_names_request() {
        let scorer = connect(9, 2, |reqs| {
            vec![
                format!("{{\"id\": {}, \"log_probs\": oops", reqs[0]["id"]),
                String::new(),
            ]
        });
        let err = scorer.score(&[query(1), query(1)]).unwrap_err();
        assert!(matches!(err, Error::Protocol { id: 0, .. }), "{err}");
        assert!(err.to_string().contains("request 0"), "{err}");
    }

    #[test]
    fn unknown_id_is_rejected() {
        let v = 9;
        let scorer = connect(v, 2, move |reqs| {
            vec![
                json!({"id": 77, "log_probs": [vec![(1.0 / v as f64).ln(); v]]}).to_string(),
                uniform(v, &reqs[1]),
            ]
        });
        let err = scorer.score(&[query(1), query(1)]).unwrap_err();
        assert!(matches!(err, Error::Protocol { id: 77, .. }), "{err}");
    }

    #[test]
    fn wrong_vector_length_is_rejected() {
        let scorer = connect(9, 2, |reqs| {
            reqs.iter()
                .map(|r| json!({"id": r["id"], "log_probs": [[-1.0, -2.0]]}).to_string())
                .collect()
        });
        assert!(matches!(
            scorer.score(&[query(1), query(1)]),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn unnormalized_vector_is_rejected() {
        let scorer = connect(9, 2, |reqs| {
            reqs.iter()
                .map(|r| json!({"id": r["id"], "log_probs": [vec![-0.1; 9]]}).to_string())
                .collect()
        });
        let err = scorer.score(&[query(1), query(1)]).unwrap_err();
        assert!(err.to_string().contains("sum to"), "{err}");
    }

    #[test]
    fn silent_peer_times_out() {
        let (req_r, req_w) = pipe().unwrap();
        let (resp_r, _resp_w) = pipe().unwrap();
        let _keep = req_r;
        let scorer = ExternalScorer::from_streams(
            req_w,
            BufReader::new(resp_r),
            vocab(&["a"]),
            Duration::from_millis(50),
        );
        let err = scorer.score(&[query(1)]).unwrap_err();
        assert!(matches!(err, Error::Timeout { id: 0 }), "{err}");
    }

    #[test]
    fn ids_continue_across_calls() {
        let v = 9;
        let scorer = connect(v, 2, move |reqs| {
            reqs.iter().map(|r| uniform(v, r)).collect()
        });
        scorer.score(&[query(1), query(1)]).unwrap();
        scorer.score(&[query(1), query(1)]).unwrap();
        assert_eq!(scorer.conn.lock().unwrap().next_id, 4);
    }
}
