//! Finite-difference verification of the loss and model gradients.

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::loss::{total_loss, CmVariant, LossHyper};
use crate::mlm::{init_model, ModelConfig, ModelParams};
use crate::scorer::PairProb;
use crate::synth::synth_generate;
use crate::tokenizer::build_vocab;
use crate::train::{batch_loss, batch_loss_and_grad, corpus_queries};

pub const LOSS_STEP: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const MODEL_STEP: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const MODEL_PASS_FRACTION: f64 = 0.99;

/// Relative errors below this denominator are measured absolutely; both
/// gradients are then numerically zero.
const REL_FLOOR: f64 = 1e-8;

/// Points closer than this to a CM kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheckReport {
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn interior_point(rng: &mut StdRng, beta: f64) -> PairProb {
    loop {
        let mut p = [[0.0; 2]; 2];
        for v in p.iter_mut().flatten() {
            *v = rng.random_range(0.05..0.95);
        }
        let far = |d: f64| d.abs() > KINK_MARGIN && (d.abs() - beta).abs() > KINK_MARGIN;
        if far(p[0][0] - p[0][1]) && far(p[1][0] - p[1][1]) {
            return PairProb::new(p);
        }
    }
}

/// Compares the analytic gradient of the total loss to central differences
/// at `points` random interior points, for both CM variants.
pub fn loss_grad_check(seed: u64, points: usize, hyper: &LossHyper) -> LossCheckReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for n in 0..points {
        let mut h = *hyper;
        if n % 2 == 1 {
            h.cm_variant = match hyper.cm_variant {
                CmVariant::Verbatim => CmVariant::Hinge,
                CmVariant::Hinge => CmVariant::Verbatim,
            };
        }
        let p = interior_point(&mut rng, h.beta);
        let g = total_loss(&p, &h).grad;
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut up = p;
            let mut down = p;
            up.p[i][j] += LOSS_STEP;
            down.p[i][j] -= LOSS_STEP;
            let num = (total_loss(&up, &h).total - total_loss(&down, &h).total) / (2.0 * LOSS_STEP);
            worst = worst.max(relative_error(g[i][j], num));
        }
    }
    LossCheckReport {
        points,
        max_rel_error: worst,
        tolerance: LOSS_TOLERANCE,
        passed: worst <= LOSS_TOLERANCE,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelCheckReport {
    pub coordinates: usize,
    pub within_tolerance: usize,
    pub pass_fraction: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Model configuration used for the end-to-end check.
pub fn grad_check_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        dim: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        max_len: 32,
        seed,
    }
}

/// End-to-end check: pair loss over a small synthetic batch, through the
/// candidate probabilities, into every model parameter. Coordinates are drawn
/// from those the batch reaches (non-zero analytic gradient), since most
/// token embedding and output rows are untouched by a few sentences.
pub fn model_grad_check(
    seed: u64,
    coordinates: usize,
    hyper: &LossHyper,
) -> Result<ModelCheckReport> {
    let corpus = synth_generate(seed, 3, 8);
    let vocab = build_vocab(&corpus, 1)?;
    let mut model: ModelParams<f64> = init_model(&grad_check_config(vocab.len(), seed))?;
    // larger weights than the init scale, so attention and layer norm are
    // exercised away from their near-uniform regime
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in model.named_tensors_mut() {
        for x in &mut t.data {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let queries = corpus_queries(&corpus, &vocab, model.config.max_len)?;
    let batch: Vec<_> = queries.iter().collect();
    let (_, grads) = batch_loss_and_grad(&model, &batch, hyper)?;

    let flat_grad = grads.flatten();
    let active: Vec<usize> = (0..flat_grad.len())
        .filter(|&i| flat_grad[i] != 0.0)
        .collect();
    let picks: Vec<usize> = if active.len() <= coordinates {
        active
    } else {
        sample(&mut rng, active.len(), coordinates)
            .into_iter()
            .map(|i| active[i])
            .collect()
    };

    let mut within = 0;
    let mut worst: f64 = 0.0;
    for &c in &picks {
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            *coordinate(&mut m, c) += delta;
            Ok(batch_loss(&m, &batch, hyper)?.total)
        };
        let num = (eval(MODEL_STEP)? - eval(-MODEL_STEP)?) / (2.0 * MODEL_STEP);
        let err = relative_error(flat_grad[c], num);
        worst = worst.max(err);
        within += usize::from(err <= MODEL_TOLERANCE);
    }
    let n = picks.len();
    let fraction = if n == 0 {
        0.0
    } else {
        within as f64 / n as f64
    };
    Ok(ModelCheckReport {
        coordinates: n,
        within_tolerance: within,
        pass_fraction: fraction,
        max_rel_error: worst,
        tolerance: MODEL_TOLERANCE,
        passed: n > 0 && fraction >= MODEL_PASS_FRACTION,
    })
}

/// The parameter at flat index `i` in `named_tensors` order.
fn coordinate(model: &mut ModelParams<f64>, mut i: usize) -> &mut f64 {
    for (_, t) in model.named_tensors_mut() {
        if i < t.len() {
            return &mut t.data[i];
        }
        i -= t.len();
    }
    panic!("coordinate out of range")
}
