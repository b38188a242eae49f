//! Scalar mix: a convex combination of an encoder's layers.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, softmax, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// Weights are `softmax(logits)` and trained.
    Learned,
    /// Weights fixed at `1 / layer_count`; logits receive no gradient.
    Uniform,
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(MixMode::Learned),
            "uniform" => Ok(MixMode::Uniform),
            other => Err(Error::Config(format!(
                "unknown mix mode {other:?} (learned|uniform)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixParams<T> {
    pub logits: Vec<T>,
    pub mode: MixMode,
}

impl<T: Scalar> MixParams<T> {
    pub fn new(layer_count: usize, mode: MixMode) -> Self {
        MixParams {
            logits: vec![T::zero(); layer_count],
            mode,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<T> {
        match self.mode {
            MixMode::Learned => softmax(&self.logits),
            MixMode::Uniform => {
                let w = T::one() / T::from_usize_lossy(self.logits.len());
                vec![w; self.logits.len()]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixCache<T> {
    pub weights: Vec<T>,
    pub mode: MixMode,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixGrad<T> {
    pub layers: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

fn check_layers<T>(layers: &[Vec<T>], expected: usize) -> Result<usize> {
    if layers.len() != expected {
        return Err(Error::Shape(format!(
            "{} layers given, mix has {expected}",
            layers.len()
        )));
    }
    let len = layers.first().map_or(0, Vec::len);
    if layers.iter().any(|l| l.len() != len) {
        return Err(Error::Shape(
            "layers differ in token count or dimension".into(),
        ));
    }
    Ok(len)
}

/// `e_t = sum_l w_l h_t^(l)`, applied elementwise to equally shaped layer matrices.
pub fn mix_forward<T: Scalar>(
    layers: &[Vec<T>],
    params: &MixParams<T>,
) -> Result<(Vec<T>, MixCache<T>)> {
    let len = check_layers(layers, params.layer_count())?;
    let weights = params.weights();
    let mut out = vec![T::zero(); len];
    for (layer, &w) in layers.iter().zip(&weights) {
        for (acc, &h) in out.iter_mut().zip(layer) {
            *acc += w * h;
        }
    }
    Ok((
        out,
        MixCache {
            weights,
            mode: params.mode,
            len,
        },
    ))
}

/// Logit gradient only; inputs are frozen in probing so layer gradients are
/// usually not needed.
pub fn mix_logit_grad<T: Scalar>(
    cache: &MixCache<T>,
    layers: &[Vec<T>],
    upstream: &[T],
) -> Result<Vec<T>> {
    let len = check_layers(layers, cache.weights.len())?;
    if len != cache.len || upstream.len() != len {
        return Err(Error::CacheMismatch("mix_backward"));
    }
    if cache.mode == MixMode::Uniform {
        return Ok(vec![T::zero(); cache.weights.len()]);
    }
    let dweights: Vec<T> = layers.iter().map(|l| dot(l, upstream)).collect();
    let mean: T = cache
        .weights
        .iter()
        .zip(&dweights)
        .map(|(&w, &d)| w * d)
        .sum();
    Ok(cache
        .weights
        .iter()
        .zip(&dweights)
        .map(|(&w, &d)| w * (d - mean))
        .collect())
}

pub fn mix_backward<T: Scalar>(
    cache: &MixCache<T>,
    layers: &[Vec<T>],
    upstream: &[T],
) -> Result<MixGrad<T>> {
    let logits = mix_logit_grad(cache, layers, upstream)?;
    let layers = cache
        .weights
        .iter()
        .map(|&w| upstream.iter().map(|&g| w * g).collect())
        .collect();
    Ok(MixGrad { layers, logits })
}

/// Layer-weight export: one `layer_index,weight` row per layer.
pub fn write_layer_weights<W: Write, T: Scalar>(writer: W, weights: &[T]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["layer_index", "weight"])?;
    for (i, w) in weights.iter().enumerate() {
        csv.write_record([i.to_string(), w.to_f64_lossy().to_string()])?;
    }
    csv.flush()?;
    Ok(())
}
