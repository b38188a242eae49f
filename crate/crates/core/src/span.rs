//! Span pooling: six ways to turn the token embeddings of a span into one
//! fixed-size vector, each with an analytic backward pass.
//!
//! Token embeddings are passed as a row-major `n x d` slice, `n >= 1`. The
//! first row is the span's start token and the last row its end token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, softmax, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Avg,
    Attn,
    Max,
    Endpoint,
    DiffSum,
    Coherent,
}

impl SpanKind {
    pub const ALL: [SpanKind; 6] = [
        SpanKind::Avg,
        SpanKind::Attn,
        SpanKind::Max,
        SpanKind::Endpoint,
        SpanKind::DiffSum,
        SpanKind::Coherent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpanKind::Avg => "avg",
            SpanKind::Attn => "attn",
            SpanKind::Max => "max",
            SpanKind::Endpoint => "endpoint",
            SpanKind::DiffSum => "diffsum",
            SpanKind::Coherent => "coherent",
        }
    }

    /// Boundary methods only read the first and last token of the span.
    pub fn is_boundary(self) -> bool {
        matches!(
            self,
            SpanKind::Endpoint | SpanKind::DiffSum | SpanKind::Coherent
        )
    }
}

impl fmt::Display for SpanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpanKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Sizes of the four endpoint parts used by the coherent method:
/// two parts of size `a` and two of size `b`, `2a + 2b = d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherentSplit {
    pub a: usize,
    pub b: usize,
}

impl CoherentSplit {
    pub fn new(a: usize, b: usize, dim: usize) -> Result<Self> {
        if a < 1 || b < 1 {
            return Err(Error::InvalidSplit {
                dim,
                reason: format!("parts must be non-empty (a={a}, b={b})"),
            });
        }
        if 2 * a + 2 * b != dim {
            return Err(Error::InvalidSplit {
                dim,
                reason: format!("2a+2b = {} != {dim}", 2 * a + 2 * b),
            });
        }
        Ok(CoherentSplit { a, b })
    }

    /// Split keeping the 480:32 proportions of a 1024-wide model:
    /// `a = round(d * 480 / 1024)`, `b = (d - 2a) / 2`.
    pub fn proportional(dim: usize) -> Result<Self> {
        if dim < 4 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidSplit {
                dim,
                reason: "dimension must be even and at least 4".into(),
            });
        }
        let a = (dim * 480 + 512) / 1024;
        let b = (dim - 2 * a.min(dim / 2)) / 2;
        CoherentSplit::new(a, b, dim)
    }

    pub fn output_dim(&self) -> usize {
        2 * self.a + 1
    }
}

/// A pooling method together with its learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum SpanMethod<T> {
    Avg,
    /// Attention pooling; `v` scores each token by `v . e_k`.
    Attn {
        v: Vec<T>,
    },
    Max,
    Endpoint,
    DiffSum,
    Coherent(CoherentSplit),
}

impl<T: Scalar> SpanMethod<T> {
    /// Default-initialized method for `d`-dimensional tokens (`v = 0`,
    /// proportional coherent split).
    pub fn new(kind: SpanKind, dim: usize) -> Result<Self> {
        Ok(match kind {
            SpanKind::Avg => SpanMethod::Avg,
            SpanKind::Attn => SpanMethod::Attn {
                v: vec![T::zero(); dim],
            },
            SpanKind::Max => SpanMethod::Max,
            SpanKind::Endpoint => SpanMethod::Endpoint,
            SpanKind::DiffSum => SpanMethod::DiffSum,
            SpanKind::Coherent => SpanMethod::Coherent(CoherentSplit::proportional(dim)?),
        })
    }

    pub fn kind(&self) -> SpanKind {
        match self {
            SpanMethod::Avg => SpanKind::Avg,
            SpanMethod::Attn { .. } => SpanKind::Attn,
            SpanMethod::Max => SpanKind::Max,
            SpanMethod::Endpoint => SpanKind::Endpoint,
            SpanMethod::DiffSum => SpanKind::DiffSum,
            SpanMethod::Coherent(_) => SpanKind::Coherent,
        }
    }

    pub fn output_dim(&self, dim: usize) -> Result<usize> {
        self.check_dim(dim)?;
        Ok(match self {
            SpanMethod::Avg | SpanMethod::Attn { .. } | SpanMethod::Max => dim,
            SpanMethod::Endpoint | SpanMethod::DiffSum => 2 * dim,
            SpanMethod::Coherent(split) => split.output_dim(),
        })
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self {
            SpanMethod::Attn { v } if v.len() != dim => Err(Error::Shape(format!(
                "attention vector has length {}, tokens have dimension {dim}",
                v.len()
            ))),
            SpanMethod::Coherent(split) => CoherentSplit::new(split.a, split.b, dim).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Same method with every learnable parameter set to zero; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        match self {
            SpanMethod::Attn { v } => SpanMethod::Attn {
                v: vec![T::zero(); v.len()],
            },
            other => other.clone(),
        }
    }

    pub fn params(&self) -> &[T] {
        match self {
            SpanMethod::Attn { v } => v,
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        match self {
            SpanMethod::Attn { v } => v,
            _ => &mut [],
        }
    }
}

/// Data the backward pass needs from the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum PoolCache<T> {
    Avg {
        n: usize,
    },
    Attn {
        weights: Vec<T>,
    },
    /// Winning token index per output dimension.
    Max {
        argmax: Vec<usize>,
    },
    Endpoint {
        n: usize,
    },
    DiffSum {
        n: usize,
    },
    Coherent {
        n: usize,
    },
}

impl<T> PoolCache<T> {
    fn kind(&self) -> SpanKind {
        match self {
            PoolCache::Avg { .. } => SpanKind::Avg,
            PoolCache::Attn { .. } => SpanKind::Attn,
            PoolCache::Max { .. } => SpanKind::Max,
            PoolCache::Endpoint { .. } => SpanKind::Endpoint,
            PoolCache::DiffSum { .. } => SpanKind::DiffSum,
            PoolCache::Coherent { .. } => SpanKind::Coherent,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolResult<T> {
    pub value: Vec<T>,
    pub cache: PoolCache<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolGrad<T> {
    /// Gradient w.r.t. the `n x d` token matrix.
    pub tokens: Vec<T>,
    /// Gradient w.r.t. the attention vector (attn only).
    pub v: Option<Vec<T>>,
}

fn token_count(len: usize, dim: usize) -> Result<usize> {
    if dim == 0 || len == 0 || !len.is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "token matrix of {len} values is not a non-empty multiple of dimension {dim}"
        )));
    }
    Ok(len / dim)
}

pub fn pool_forward<T: Scalar>(
    method: &SpanMethod<T>,
    tokens: &[T],
    dim: usize,
) -> Result<PoolResult<T>> {
    let n = token_count(tokens.len(), dim)?;
    method.check_dim(dim)?;
    let row = |k: usize| &tokens[k * dim..(k + 1) * dim];
    let first = row(0);
    let last = row(n - 1);

    let result = match method {
        SpanMethod::Avg => {
            // Accumulated as sum_k (1/n) e_k, the same arithmetic attention
            // performs with uniform weights, so attn with v = 0 matches bit for bit.
            let w = T::one() / T::from_usize_lossy(n);
            let mut value = vec![T::zero(); dim];
            for k in 0..n {
                for (acc, &x) in value.iter_mut().zip(row(k)) {
                    *acc += w * x;
                }
            }
            PoolResult {
                value,
                cache: PoolCache::Avg { n },
            }
        }
        SpanMethod::Attn { v } => {
            let logits: Vec<T> = (0..n).map(|k| dot(v, row(k))).collect();
            let weights = softmax(&logits);
            let mut value = vec![T::zero(); dim];
            for (k, &w) in weights.iter().enumerate() {
                for (acc, &x) in value.iter_mut().zip(row(k)) {
                    *acc += w * x;
                }
            }
            PoolResult {
                value,
                cache: PoolCache::Attn { weights },
            }
        }
        SpanMethod::Max => {
            let mut value = first.to_vec();
            let mut argmax = vec![0usize; dim];
            for k in 1..n {
                for (i, &x) in row(k).iter().enumerate() {
                    // strict comparison: ties keep the lowest index
                    if x > value[i] {
                        value[i] = x;
                        argmax[i] = k;
                    }
                }
            }
            PoolResult {
                value,
                cache: PoolCache::Max { argmax },
            }
        }
        SpanMethod::Endpoint => {
            let mut value = Vec::with_capacity(2 * dim);
            value.extend_from_slice(first);
            value.extend_from_slice(last);
            PoolResult {
                value,
                cache: PoolCache::Endpoint { n },
            }
        }
        SpanMethod::DiffSum => {
            let mut value = Vec::with_capacity(2 * dim);
            value.extend(first.iter().zip(last).map(|(&i, &j)| j + i));
            value.extend(first.iter().zip(last).map(|(&i, &j)| j - i));
            PoolResult {
                value,
                cache: PoolCache::DiffSum { n },
            }
        }
        SpanMethod::Coherent(CoherentSplit { a, b }) => {
            let (a, b) = (*a, *b);
            let mut value = Vec::with_capacity(2 * a + 1);
            value.extend_from_slice(&first[..a]);
            value.extend_from_slice(&last[a..2 * a]);
            value.push(dot(&first[2 * a..2 * a + b], &last[2 * a + b..]));
            PoolResult {
                value,
                cache: PoolCache::Coherent { n },
            }
        }
    };
    Ok(result)
}

pub fn pool_backward<T: Scalar>(
    method: &SpanMethod<T>,
    cache: &PoolCache<T>,
    tokens: &[T],
    dim: usize,
    upstream: &[T],
) -> Result<PoolGrad<T>> {
    if cache.kind() != method.kind() {
        return Err(Error::CacheMismatch("pool_backward"));
    }
    let n = token_count(tokens.len(), dim)?;
    let out_dim = method.output_dim(dim)?;
    if upstream.len() != out_dim {
        return Err(Error::Shape(format!(
            "upstream gradient has length {}, expected {out_dim}",
            upstream.len()
        )));
    }
    let row = |k: usize| &tokens[k * dim..(k + 1) * dim];
    let mut grad = vec![T::zero(); n * dim];
    let last = (n - 1) * dim;
    let mut grad_v = None;

    match (method, cache) {
        (SpanMethod::Avg, PoolCache::Avg { n: cached }) => {
            if *cached != n {
                return Err(Error::CacheMismatch("pool_backward"));
            }
            let w = T::one() / T::from_usize_lossy(n);
            for k in 0..n {
                for (g, &u) in grad[k * dim..(k + 1) * dim].iter_mut().zip(upstream) {
                    *g = w * u;
                }
            }
        }
        (SpanMethod::Attn { v }, PoolCache::Attn { weights }) => {
            if weights.len() != n {
                return Err(Error::CacheMismatch("pool_backward"));
            }
            // s = sum_k a_k e_k, a = softmax(v . e)
            let scores: Vec<T> = (0..n).map(|k| dot(upstream, row(k))).collect();
            let pooled: T = weights.iter().zip(&scores).map(|(&w, &s)| w * s).sum();
            let mut dv = vec![T::zero(); dim];
            for k in 0..n {
                let dlogit = weights[k] * (scores[k] - pooled);
                let g = &mut grad[k * dim..(k + 1) * dim];
                for i in 0..dim {
                    g[i] = weights[k] * upstream[i] + dlogit * v[i];
                    dv[i] += dlogit * tokens[k * dim + i];
                }
            }
            grad_v = Some(dv);
        }
        (SpanMethod::Max, PoolCache::Max { argmax }) => {
            if argmax.len() != dim || argmax.iter().any(|&k| k >= n) {
                return Err(Error::CacheMismatch("pool_backward"));
            }
            for (i, &k) in argmax.iter().enumerate() {
                grad[k * dim + i] += upstream[i];
            }
        }
        (SpanMethod::Endpoint, PoolCache::Endpoint { .. }) => {
            for i in 0..dim {
                grad[i] += upstream[i];
                grad[last + i] += upstream[dim + i];
            }
        }
        (SpanMethod::DiffSum, PoolCache::DiffSum { .. }) => {
            // s = [e_j + e_i; e_j - e_i]
            for i in 0..dim {
                let (sum, diff) = (upstream[i], upstream[dim + i]);
                grad[i] += sum - diff;
                grad[last + i] += sum + diff;
            }
        }
        (SpanMethod::Coherent(CoherentSplit { a, b }), PoolCache::Coherent { .. }) => {
            let (a, b) = (*a, *b);
            let coherence = upstream[2 * a];
            let (first, end) = (row(0).to_vec(), row(n - 1).to_vec());
            for i in 0..a {
                grad[i] += upstream[i];
                grad[last + a + i] += upstream[a + i];
            }
            for i in 0..b {
                grad[2 * a + i] += coherence * end[2 * a + b + i];
                grad[last + 2 * a + b + i] += coherence * first[2 * a + i];
            }
        }
        _ => return Err(Error::CacheMismatch("pool_backward")),
    }
    Ok(PoolGrad {
        tokens: grad,
        v: grad_v,
    })
}
