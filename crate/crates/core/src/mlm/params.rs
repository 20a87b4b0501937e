use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Real, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, w1, b1, w2, b2, ln2_gain, ln2_bias)
    };
}

impl<T: Real> LayerParams<T> {
    fn zeros(c: &ModelConfig) -> Self {
        let (d, f) = (c.dim, c.ff_dim);
        LayerParams {
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &self.$f)),*] };
        }
        layer_fields!(list)
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &mut self.$f)),*] };
        }
        layer_fields!(list)
    }
}

/// All trainable tensors of the encoder plus the configuration they were
/// built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `[vocab_size × dim]`
    pub tok_emb: Tensor<T>,
    /// `[max_len × dim]`
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `[dim × vocab_size]`, not tied to `tok_emb`.
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// Same shapes as `config` describes, every entry zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.dim);
        Ok(ModelParams {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[v, d]),
            pos_emb: Tensor::zeros(&[config.max_len, d]),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(config))
                .collect(),
            out_w: Tensor::zeros(&[d, v]),
            out_b: Tensor::zeros(&[v]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Tensors with stable dotted names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{l}.{n}"), t)),
            );
        }
        out.push(("out_w".to_string(), &self.out_w));
        out.push(("out_b".to_string(), &self.out_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{l}.{n}"), t)),
            );
        }
        out.push(("out_w".to_string(), &mut self.out_w));
        out.push(("out_b".to_string(), &mut self.out_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config).expect("config already validated");
        for ((_, src), (_, dst)) in self
            .named_tensors()
            .into_iter()
            .zip(out.named_tensors_mut())
        {
            *dst = src.cast();
        }
        out
    }

    /// Parameters flattened in [`named_tensors`](Self::named_tensors) order.
    pub fn flatten(&self) -> Vec<T> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self
            .named_tensors_mut()
            .into_iter()
            .zip(other.named_tensors())
        {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + scale * y;
            }
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        let a = self.named_tensors();
        let b = other.named_tensors();
        if a.len() != b.len() {
            return Err(Error::Shape(format!("{} vs {} tensors", a.len(), b.len())));
        }
        for ((na, ta), (_, tb)) in a.iter().zip(&b) {
            if ta.shape != tb.shape {
                return Err(Error::Shape(format!(
                    "{na}: {:?} vs {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf.starts_with('b') || leaf.ends_with("_bias") || leaf == "out_b"
}

/// Weights from `normal(0, INIT_STD)` drawn in tensor order from a generator
/// seeded with `config.seed`; biases zero; layer-norm gains one.
pub fn init_model<T: Real>(config: &ModelConfig) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::zeros(config)?;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    for (name, t) in params.named_tensors_mut() {
        if name.ends_with("_gain") {
            t.data.fill(T::one());
        } else if !is_bias(&name) {
            for x in &mut t.data {
                *x = T::lit(normal.sample(&mut rng));
            }
        }
    }
    Ok(params)
}
