//! Masked-language-model scorer: a small post-LN transformer encoder with
//! hand-written backpropagation, its checkpoint format, and an adapter for
//! external scorer processes.

mod checkpoint;
mod external;
mod model;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use external::{ExternalScorer, DEFAULT_TIMEOUT};
pub use model::Tape;
pub use params::{init_model, LayerParams, ModelParams};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::MaskedQuery;

/// Floating point type the model can be instantiated with. Training and
/// checkpoints use `f32`; `f64` is used for numerical verification.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::iter::Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::ff_dim")]
    pub ff_dim: usize,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn dim() -> usize {
        64
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn ff_dim() -> usize {
        256
    }
    pub fn max_len() -> usize {
        64
    }
}

impl ModelConfig {
    /// Desk-scale defaults for the given vocabulary size.
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            dim: defaults::dim(),
            n_layers: defaults::n_layers(),
            n_heads: defaults::n_heads(),
            ff_dim: defaults::ff_dim(),
            max_len: defaults::max_len(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }
}

/// Log-probabilities for one query: one vector over the vocabulary per mask
/// position.
pub type MaskLogProbs = Vec<Vec<f64>>;

/// Anything that can fill masks with a distribution over the vocabulary.
pub trait ScorerBackend {
    fn vocab_size(&self) -> usize;

    /// Longest query the backend accepts.
    fn max_len(&self) -> usize {
        usize::MAX
    }

    /// One [`MaskLogProbs`] per query, in query order. Every vector must be
    /// normalized in probability space.
    fn score(&self, queries: &[MaskedQuery]) -> Result<Vec<MaskLogProbs>>;
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for &B {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn max_len(&self) -> usize {
        (**self).max_len()
    }

    fn score(&self, queries: &[MaskedQuery]) -> Result<Vec<MaskLogProbs>> {
        (**self).score(queries)
    }
}

impl<T: Real> ScorerBackend for ModelParams<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn score(&self, queries: &[MaskedQuery]) -> Result<Vec<MaskLogProbs>> {
        let out = self.forward(queries)?;
        Ok(out
            .into_iter()
            .map(|q| {
                q.into_iter()
                    .map(|v| {
                        v.into_iter()
                            .map(|x| x.to_f64().unwrap_or(f64::NAN))
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(10, 0);
        assert!(c.validate().is_ok());
        c.dim = 63;
        assert!(c.validate().is_err());
        c.dim = 64;
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"vocab_size": 9}"#).unwrap();
        assert_eq!(c, ModelConfig::new(9, 0));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"vocab_size": 9, "dims": 3}"#).is_err());
    }
}
