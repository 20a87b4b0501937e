//! Mutual-exclusivity loss and contrastive margin over a pair's 2×2
//! candidate probability matrix.
//!
//! Boolean logic is relaxed to arithmetic on probabilities: `a ∧ b → a·b`,
//! `a ∨ b → a + b`, `¬a → 1 − a`. XOR then becomes `a(1−b) + b(1−a)`.
//!
//! With `A = p[0][0]·p[1][1]` (candidate 0 in sentence 0, candidate 1 in
//! sentence 1) and `B = p[0][1]·p[1][0]` (the crossed assignment):
//!
//! ```text
//! mex = −γ · (A(1−B) + B(1−A))
//! cm  = −α · Σ_i max(0, |p[i][0] − p[i][1]| + β)     (verbatim)
//! cm  = +α · Σ_i max(0, β − |p[i][0] − p[i][1]|)     (hinge)
//! ```
//!
//! The relaxed MEx term is not a term-by-term relaxation of
//! [`eval_logical`]: at the corner `(c00, c01, c10, c11) = (1, 0, 1, 1)` the
//! boolean constraint is false while `soft_xor(A, B)` is 1. Both corners that
//! satisfy the boolean constraint do reach the minimum `−γ`.

use serde::{Deserialize, Serialize};

use crate::scorer::PairProb;

pub const DEFAULT_GAMMA: f64 = 60.0;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmVariant {
    /// `−α · max(0, |Δ| + β)`, always active for `β > 0`.
    #[default]
    Verbatim,
    /// `+α · max(0, β − |Δ|)`, inactive once `|Δ| ≥ β`.
    Hinge,
}

impl std::str::FromStr for CmVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(CmVariant::Verbatim),
            "hinge" => Ok(CmVariant::Hinge),
            other => Err(format!(
                "unknown CM variant {other:?} (expected verbatim or hinge)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyper {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cm_enabled: bool,
    pub cm_variant: CmVariant,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            cm_enabled: true,
            cm_variant: CmVariant::Verbatim,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<(), String> {
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(format!("gamma must be > 0, got {}", self.gamma));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(format!("beta must be >= 0, got {}", self.beta));
        }
        Ok(())
    }
}

pub type Grad = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub mex: f64,
    pub cm: f64,
    /// `∂total/∂p[i][j]`
    pub grad: Grad,
}

/// The boolean constraint on a twin pair; `c[i][j]` is candidate `i` in
/// sentence `j`.
pub fn eval_logical(c: [[bool; 2]; 2]) -> bool {
    (c[0][0] ^ c[1][0]) && (c[0][1] ^ c[1][1]) && (c[0][0] ^ c[0][1])
}

pub fn soft_xor(a: f64, b: f64) -> f64 {
    a * (1.0 - b) + b * (1.0 - a)
}

pub fn mex_loss(p: &PairProb, gamma: f64) -> (f64, Grad) {
    let p = &p.p;
    let a = p[0][0] * p[1][1];
    let b = p[0][1] * p[1][0];
    let value = -gamma * soft_xor(a, b);
    let d_a = -gamma * (1.0 - 2.0 * b);
    let d_b = -gamma * (1.0 - 2.0 * a);
    let grad = [
        [d_a * p[1][1], d_b * p[1][0]],
        [d_b * p[0][1], d_a * p[0][0]],
    ];
    (value, grad)
}

pub fn cm_loss(p: &PairProb, alpha: f64, beta: f64, variant: CmVariant) -> (f64, Grad) {
    let mut value = 0.0;
    let mut grad = [[0.0; 2]; 2];
    for (i, row) in p.p.iter().enumerate() {
        let delta = row[0] - row[1];
        let sign = if delta > 0.0 {
            1.0
        } else if delta < 0.0 {
            -1.0
        } else {
            0.0
        };
        // d value / d delta, zero where the term is inactive or at a kink
        let slope = match variant {
            CmVariant::Verbatim => {
                let m = delta.abs() + beta;
                if m > 0.0 {
                    value += -alpha * m;
                    -alpha * sign
                } else {
                    0.0
                }
            }
            CmVariant::Hinge => {
                let m = beta - delta.abs();
                if m > 0.0 {
                    value += alpha * m;
                    -alpha * sign
                } else {
                    0.0
                }
            }
        };
        grad[i][0] = slope;
        grad[i][1] = -slope;
    }
    (value, grad)
}

pub fn total_loss(p: &PairProb, hyper: &LossHyper) -> LossValue {
    let (mex, mut grad) = mex_loss(p, hyper.gamma);
    let cm = if hyper.cm_enabled {
        let (cm, g) = cm_loss(p, hyper.alpha, hyper.beta, hyper.cm_variant);
        for i in 0..2 {
            for j in 0..2 {
                grad[i][j] += g[i][j];
            }
        }
        cm
    } else {
        0.0
    };
    LossValue {
        total: mex + cm,
        mex,
        cm,
        grad,
    }
}
