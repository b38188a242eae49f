//! The probing classifier: layer mix, projection, span pooling, MLP and
//! independent per-label sigmoids.
//!
//! ```text
//! layers -> mix -> projection (one per span for SRL) -> pool -> concat
//!        -> linear -> tanh -> layer norm -> dropout -> linear -> sigmoid
//! ```

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Arity;
use crate::error::{Error, Result};
use crate::mix::{mix_forward, mix_logit_grad, MixCache, MixMode, MixParams};
use crate::nn::{dropout_mask, layer_norm, layer_norm_backward, DropoutKey, Linear, NormCache};
use crate::scalar::{sigmoid, Scalar};
use crate::span::{pool_backward, pool_forward, CoherentSplit, PoolCache, SpanKind, SpanMethod};
use crate::store::LayeredEmbeddings;

pub const DECISION_THRESHOLD: f64 = 0.5;
const PROB_CLAMP: f64 = 1e-12;

/// Architecture of a probe; everything needed to rebuild its parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub method: SpanKind,
    pub arity: Arity,
    pub separate_projections: bool,
    pub layer_count: usize,
    pub d_model: usize,
    pub label_count: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub mix_mode: MixMode,
    pub layer_norm_eps: f64,
    /// Explicit coherent split; the proportional split of `proj_dim` when absent.
    pub coherent_split: Option<CoherentSplit>,
}

impl ProbeConfig {
    pub fn new(
        method: SpanKind,
        arity: Arity,
        layer_count: usize,
        d_model: usize,
        label_count: usize,
    ) -> Self {
        ProbeConfig {
            method,
            arity,
            separate_projections: false,
            layer_count,
            d_model,
            label_count,
            proj_dim: 256,
            hidden_dim: 256,
            dropout: 0.3,
            mix_mode: MixMode::Learned,
            layer_norm_eps: 1e-5,
            coherent_split: None,
        }
    }

    pub fn projection_count(&self) -> usize {
        if self.separate_projections && self.arity == Arity::TwoSpan {
            2
        } else {
            1
        }
    }

    fn span_method<T: Scalar>(&self) -> Result<SpanMethod<T>> {
        match (self.method, self.coherent_split) {
            (SpanKind::Coherent, Some(split)) => Ok(SpanMethod::Coherent(CoherentSplit::new(
                split.a,
                split.b,
                self.proj_dim,
            )?)),
            (kind, _) => SpanMethod::new(kind, self.proj_dim),
        }
    }

    pub fn mlp_input_dim(&self) -> Result<usize> {
        Ok(self.span_method::<f64>()?.output_dim(self.proj_dim)? * self.arity.span_count())
    }

    fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.d_model == 0 || self.label_count == 0 {
            return Err(Error::Config(
                "layer_count, d_model and label_count must be positive".into(),
            ));
        }
        if self.proj_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "proj_dim and hidden_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Every learned tensor of a probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams<T> {
    pub mix: MixParams<T>,
    pub projections: Vec<Linear<T>>,
    pub span: SpanMethod<T>,
    pub hidden: Linear<T>,
    pub norm_gain: Vec<T>,
    pub norm_offset: Vec<T>,
    pub output: Linear<T>,
}

/// Named view of one parameter tensor.
#[derive(Debug)]
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

fn linear_views<'a, T>(name: &str, l: &'a Linear<T>) -> [TensorView<'a, T>; 2] {
    [
        TensorView {
            name: format!("{name}.weight"),
            shape: vec![l.out_dim, l.in_dim],
            data: &l.weight,
        },
        TensorView {
            name: format!("{name}.bias"),
            shape: vec![l.out_dim],
            data: &l.bias,
        },
    ]
}

impl<T: Scalar> ProbeParams<T> {
    pub fn init(config: &ProbeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = config.span_method()?;
        let projections = (0..config.projection_count())
            .map(|_| Linear::glorot(config.d_model, config.proj_dim, &mut rng))
            .collect();
        let hidden = Linear::glorot(config.mlp_input_dim()?, config.hidden_dim, &mut rng);
        let output = Linear::glorot(config.hidden_dim, config.label_count, &mut rng);
        Ok(ProbeParams {
            mix: MixParams::new(config.layer_count, config.mix_mode),
            projections,
            span,
            hidden,
            norm_gain: vec![T::one(); config.hidden_dim],
            norm_offset: vec![T::zero(); config.hidden_dim],
            output,
        })
    }

    /// Same shapes, every value zero (gradient accumulator / optimizer moments).
    pub fn zeros_like(&self) -> Self {
        let zero_lin = |l: &Linear<T>| Linear::zeros(l.in_dim, l.out_dim);
        ProbeParams {
            mix: MixParams {
                logits: vec![T::zero(); self.mix.logits.len()],
                mode: self.mix.mode,
            },
            projections: self.projections.iter().map(zero_lin).collect(),
            span: self.span.zeros_like(),
            hidden: zero_lin(&self.hidden),
            norm_gain: vec![T::zero(); self.norm_gain.len()],
            norm_offset: vec![T::zero(); self.norm_offset.len()],
            output: zero_lin(&self.output),
        }
    }

    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let mut out = vec![TensorView {
            name: "mix.logits".into(),
            shape: vec![self.mix.logits.len()],
            data: &self.mix.logits[..],
        }];
        for (i, p) in self.projections.iter().enumerate() {
            out.push(TensorView {
                name: format!("proj.{i}.weight"),
                shape: vec![p.out_dim, p.in_dim],
                data: &p.weight,
            });
            out.push(TensorView {
                name: format!("proj.{i}.bias"),
                shape: vec![p.out_dim],
                data: &p.bias,
            });
        }
        if let SpanMethod::Attn { v } = &self.span {
            out.push(TensorView {
                name: "span.attn.v".into(),
                shape: vec![v.len()],
                data: v,
            });
        }
        let [hw, hb] = linear_views("mlp.hidden", &self.hidden);
        out.push(hw);
        out.push(hb);
        out.push(TensorView {
            name: "mlp.norm.gain".into(),
            shape: vec![self.norm_gain.len()],
            data: &self.norm_gain,
        });
        out.push(TensorView {
            name: "mlp.norm.offset".into(),
            shape: vec![self.norm_offset.len()],
            data: &self.norm_offset,
        });
        let [ow, ob] = linear_views("mlp.output", &self.output);
        out.push(ow);
        out.push(ob);
        out
    }

    /// Mutable slices in the same order as [`ProbeParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.mix.logits[..]];
        for p in &mut self.projections {
            out.push(&mut p.weight[..]);
            out.push(&mut p.bias[..]);
        }
        if let SpanMethod::Attn { v } = &mut self.span {
            out.push(&mut v[..]);
        }
        out.push(&mut self.hidden.weight[..]);
        out.push(&mut self.hidden.bias[..]);
        out.push(&mut self.norm_gain[..]);
        out.push(&mut self.norm_offset[..]);
        out.push(&mut self.output.weight[..]);
        out.push(&mut self.output.bias[..]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ProbeParams<T>, scale: T) {
        let src: Vec<&[T]> = other.tensors().into_iter().map(|t| t.data).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Output of a forward pass for one target.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub probabilities: Vec<T>,
}

impl<T: Scalar> Prediction<T> {
    /// Label indices whose probability exceeds the decision threshold.
    pub fn decided(&self) -> Vec<usize> {
        let threshold = T::lit(DECISION_THRESHOLD);
        (0..self.probabilities.len())
            .filter(|&i| self.probabilities[i] > threshold)
            .collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
struct SpanCache<T> {
    projection: usize,
    layers: Vec<Vec<T>>,
    mix: MixCache<T>,
    mixed: Vec<T>,
    projected: Vec<T>,
    pool: PoolCache<T>,
}

/// Everything the backward pass replays from the forward pass.
#[derive(Clone, Debug)]
pub struct ProbeCache<T> {
    spans: Vec<SpanCache<T>>,
    concat: Vec<T>,
    activated: Vec<T>,
    norm: NormCache<T>,
    mask: Option<Vec<T>>,
    dropped: Vec<T>,
    probabilities: Vec<T>,
}

/// A probe: architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe<T> {
    pub config: ProbeConfig,
    pub params: ProbeParams<T>,
}

/// Subtokens a pooling method reads from the span `[start, end)`.
fn pooled_tokens(kind: SpanKind, start: usize, end: usize) -> Vec<usize> {
    if kind.is_boundary() && end - start > 2 {
        vec![start, end - 1]
    } else {
        (start..end).collect()
    }
}

impl<T: Scalar> Probe<T> {
    pub fn new(config: ProbeConfig, seed: u64) -> Result<Self> {
        let params = ProbeParams::init(&config, seed)?;
        Ok(Probe { config, params })
    }

    /// Forward pass on one target. `spans` are subtoken ranges, one per
    /// span of the task. Dropout is applied only when `dropout` is given.
    pub fn forward(
        &self,
        sentence: &LayeredEmbeddings,
        spans: &[(usize, usize)],
        dropout: Option<DropoutKey>,
    ) -> Result<(Prediction<T>, ProbeCache<T>)> {
        let cfg = &self.config;
        if spans.len() != cfg.arity.span_count() {
            return Err(Error::Shape(format!(
                "{} spans given to a {}-span probe",
                spans.len(),
                cfg.arity.span_count()
            )));
        }
        if sentence.dim != cfg.d_model || sentence.layer_count != cfg.layer_count {
            return Err(Error::Shape(format!(
                "sentence has {} layers x dim {}, probe expects {} x {}",
                sentence.layer_count, sentence.dim, cfg.layer_count, cfg.d_model
            )));
        }
        let p = &self.params;
        let mut span_caches = Vec::with_capacity(spans.len());
        let mut concat = Vec::with_capacity(self.params.hidden.in_dim);
        for (k, &(start, end)) in spans.iter().enumerate() {
            if start >= end || end > sentence.subtoken_count {
                return Err(Error::Shape(format!(
                    "subtoken span [{start},{end}) invalid for {} subtokens",
                    sentence.subtoken_count
                )));
            }
            let tokens = pooled_tokens(cfg.method, start, end);
            let layers: Vec<Vec<T>> = (0..cfg.layer_count)
                .map(|l| {
                    tokens
                        .iter()
                        .flat_map(|&t| sentence.row(l, t).iter().map(|&x| T::from_f32_lossless(x)))
                        .collect()
                })
                .collect();
            let (mixed, mix_cache) = mix_forward(&layers, &p.mix)?;
            let projection = if p.projections.len() > 1 { k } else { 0 };
            let proj = &p.projections[projection];
            let projected: Vec<T> = mixed
                .chunks_exact(cfg.d_model)
                .flat_map(|x| proj.forward(x))
                .collect();
            let pooled = pool_forward(&p.span, &projected, cfg.proj_dim)?;
            concat.extend_from_slice(&pooled.value);
            span_caches.push(SpanCache {
                projection,
                layers,
                mix: mix_cache,
                mixed,
                projected,
                pool: pooled.cache,
            });
        }

        let activated: Vec<T> = p.hidden.forward(&concat).into_iter().map(T::tanh).collect();
        let norm = layer_norm(&activated, T::lit(cfg.layer_norm_eps));
        let scaled: Vec<T> = norm
            .normalized
            .iter()
            .zip(p.norm_gain.iter().zip(&p.norm_offset))
            .map(|(&x, (&g, &b))| x * g + b)
            .collect();
        let mask = match dropout {
            Some(key) if cfg.dropout > 0.0 => {
                Some(dropout_mask::<T>(scaled.len(), cfg.dropout, key))
            }
            _ => None,
        };
        let dropped: Vec<T> = match &mask {
            Some(m) => scaled.iter().zip(m).map(|(&x, &m)| x * m).collect(),
            None => scaled,
        };
        let probabilities: Vec<T> = p
            .output
            .forward(&dropped)
            .into_iter()
            .map(sigmoid)
            .collect();

        Ok((
            Prediction {
                probabilities: probabilities.clone(),
            },
            ProbeCache {
                spans: span_caches,
                concat,
                activated,
                norm,
                mask,
                dropped,
                probabilities,
            },
        ))
    }

    /// Accumulates `scale * d(bce)/d(params)` into `grads`.
    pub fn backward(
        &self,
        cache: &ProbeCache<T>,
        gold: &[bool],
        scale: T,
        grads: &mut ProbeParams<T>,
    ) -> Result<()> {
        let cfg = &self.config;
        let p = &self.params;
        if gold.len() != cache.probabilities.len() || cache.spans.len() != cfg.arity.span_count() {
            return Err(Error::CacheMismatch("probe_backward"));
        }
        // d bce / d logit = p - y
        let dlogits: Vec<T> = cache
            .probabilities
            .iter()
            .zip(gold)
            .map(|(&prob, &y)| (prob - if y { T::one() } else { T::zero() }) * scale)
            .collect();
        p.output
            .accumulate_grad(&cache.dropped, &dlogits, &mut grads.output);
        let mut dscaled = p.output.backward_input(&dlogits);
        if let Some(mask) = &cache.mask {
            dscaled.iter_mut().zip(mask).for_each(|(d, &m)| *d *= m);
        }
        let mut dnorm = vec![T::zero(); dscaled.len()];
        for i in 0..dscaled.len() {
            grads.norm_gain[i] += dscaled[i] * cache.norm.normalized[i];
            grads.norm_offset[i] += dscaled[i];
            dnorm[i] = dscaled[i] * p.norm_gain[i];
        }
        let dact = layer_norm_backward(&cache.norm, &dnorm);
        let dhidden: Vec<T> = dact
            .iter()
            .zip(&cache.activated)
            .map(|(&d, &a)| d * (T::one() - a * a))
            .collect();
        p.hidden
            .accumulate_grad(&cache.concat, &dhidden, &mut grads.hidden);
        let dconcat = p.hidden.backward_input(&dhidden);

        let mut offset = 0;
        for span in &cache.spans {
            let width = p.span.output_dim(cfg.proj_dim)?;
            let dpooled = &dconcat[offset..offset + width];
            offset += width;
            let pool_grad =
                pool_backward(&p.span, &span.pool, &span.projected, cfg.proj_dim, dpooled)?;
            if let (Some(dv), SpanMethod::Attn { v }) = (&pool_grad.v, &mut grads.span) {
                v.iter_mut().zip(dv).for_each(|(g, &d)| *g += d);
            }
            let proj = &p.projections[span.projection];
            let mut dmixed = Vec::with_capacity(span.mixed.len());
            for (x, dy) in span
                .mixed
                .chunks_exact(cfg.d_model)
                .zip(pool_grad.tokens.chunks_exact(cfg.proj_dim))
            {
                proj.accumulate_grad(x, dy, &mut grads.projections[span.projection]);
                dmixed.extend(proj.backward_input(dy));
            }
            let dlogits = mix_logit_grad(&span.mix, &span.layers, &dmixed)?;
            grads
                .mix
                .logits
                .iter_mut()
                .zip(dlogits)
                .for_each(|(g, d)| *g += d);
        }
        Ok(())
    }

    /// Mean binary cross-entropy of eval-mode predictions; convenience for checks.
    pub fn loss(
        &self,
        sentence: &LayeredEmbeddings,
        spans: &[(usize, usize)],
        gold: &[bool],
    ) -> Result<T> {
        let (pred, _) = self.forward(sentence, spans, None)?;
        Ok(bce_loss(&pred.probabilities, gold))
    }
}

/// `-sum_l [y log p + (1 - y) log(1 - p)]`, probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss<T: Scalar>(probabilities: &[T], gold: &[bool]) -> T {
    let eps = T::lit(PROB_CLAMP);
    probabilities
        .iter()
        .zip(gold)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(T::one() - eps);
            if y {
                -p.ln()
            } else {
                -(T::one() - p).ln()
            }
        })
        .sum()
}
