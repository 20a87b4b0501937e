//! Test peer for the external scorer protocol: answers every request with a
//! uniform distribution over the vocabulary.

use std::io::{BufRead, Write};

use clap::Parser;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(about = "Uniform-distribution scorer speaking the JSON-lines protocol")]
struct Args {
    #[arg(long)]
    vocab_size: usize,
}

#[derive(Deserialize)]
struct Request {
    id: u64,
    #[allow(dead_code)]
    tokens: Vec<String>,
    mask_positions: Vec<usize>,
}

#[derive(Serialize)]
struct Response {
    id: u64,
    log_probs: Vec<Vec<f64>>,
}

fn main() {
    let args = Args::parse();
    let row = vec![(1.0 / args.vocab_size as f64).ln(); args.vocab_size];
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("bad request: {e}");
                std::process::exit(2);
            }
        };
        let resp = Response {
            id: req.id,
            log_probs: vec![row.clone(); req.mask_positions.len()],
        };
        serde_json::to_writer(&mut out, &resp).expect("stdout");
        out.write_all(b"\n").expect("stdout");
        out.flush().expect("stdout");
    }
}
