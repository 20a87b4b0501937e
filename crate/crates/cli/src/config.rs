//! Run configuration: one JSON document covering model, training, loss and
//! file locations.

use std::path::{Path, PathBuf};

use cssr::ModelConfig;
use cssr::{Corpus, TrainConfig};
use serde::{Deserialize, Serialize};

/// Model shape without the vocabulary size, which comes from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::new(0, 0);
        ModelSection {
            dim: c.dim,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            ff_dim: c.ff_dim,
            max_len: c.max_len,
            seed: c.seed,
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

/// Generate the corpus instead of reading it; the last `heldout` pairs are
/// kept out of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub pairs: usize,
    #[serde(default)]
    pub heldout: usize,
    #[serde(default = "all_templates")]
    pub templates: usize,
}

fn all_templates() -> usize {
    cssr::synth::template_count()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Training corpus; ignored when a `synth` section is present.
    pub corpus: Option<PathBuf>,
    /// Labeled corpus evaluated after training.
    pub heldout: Option<PathBuf>,
    /// Read if it exists, otherwise built from the training corpus and
    /// written here.
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Evaluation report of the held-out corpus.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synth: Option<SynthSection>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Training and held-out corpora as the config describes them.
    pub fn corpora(&self) -> cssr::Result<(Corpus, Option<Corpus>)> {
        if let Some(s) = &self.synth {
            let all = cssr::synth_generate(s.seed, s.pairs, s.templates);
            if s.heldout == 0 {
                return Ok((all, None));
            }
            let name = format!("{}-heldout", all.name);
            let (train, held) = all.split_tail(s.heldout, name);
            return Ok((train, Some(held)));
        }
        let corpus = match &self.paths.corpus {
            Some(p) => cssr::load_corpus(p)?,
            None => {
                return Err(cssr::Error::Config(
                    "no corpus path or synth section".into(),
                ))
            }
        };
        let heldout = self
            .paths
            .heldout
            .as_ref()
            .map(cssr::load_corpus)
            .transpose()?;
        Ok((corpus, heldout))
    }
}
