//! Central finite-difference check of the probe's analytic gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Arity;
use crate::error::Result;
use crate::probe::{Probe, ProbeConfig};
use crate::span::SpanKind;
use crate::store::LayeredEmbeddings;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub method: SpanKind,
    pub arity: Arity,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// One random probe and input small enough to difference every parameter.
pub struct Instance {
    pub probe: Probe<f64>,
    pub sentence: LayeredEmbeddings,
    pub spans: Vec<(usize, usize)>,
    pub gold: Vec<bool>,
}

/// Random 3-word sentence (5 subtokens with boundary tokens, one word split
/// in two), `d_model = 8`, 2 layers, 2 labels, dropout off, every parameter
/// randomized (including the attention vector and mix logits).
pub fn random_instance(method: SpanKind, arity: Arity, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layers, subtokens, dim) = (2, 5, 8);
    let mut config = ProbeConfig::new(method, arity, layers, dim, 2);
    config.proj_dim = 20;
    config.hidden_dim = 6;
    config.dropout = 0.0;
    config.separate_projections = arity == Arity::TwoSpan && rng.gen_bool(0.5);
    let mut probe = Probe::new(config, rng.gen())?;
    for tensor in probe.params.tensors_mut() {
        for x in tensor.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let values = (0..layers * subtokens * dim)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let sentence = LayeredEmbeddings::new(
        seed,
        layers,
        subtokens,
        dim,
        vec![(1, 2), (2, 4), (4, 5)],
        values,
    )?;
    let spans = (0..arity.span_count())
        .map(|_| {
            let start = rng.gen_range(0..3);
            let end = rng.gen_range(start + 1..=3);
            sentence.map_span(crate::data::SpanIndex { start, end })
        })
        .collect();
    let gold = vec![rng.gen_bool(0.5), rng.gen_bool(0.5)];
    Ok(Instance {
        probe,
        sentence,
        spans,
        gold,
    })
}

/// Compares the analytic gradient of the eval-mode loss against central
/// differences over every parameter.
pub fn check_instance(instance: &Instance) -> Result<GradCheckReport> {
    let Instance {
        probe,
        sentence,
        spans,
        gold,
    } = instance;
    let (_, cache) = probe.forward(sentence, spans, None)?;
    let mut grads = probe.params.zeros_like();
    probe.backward(&cache, gold, 1.0, &mut grads)?;

    let names: Vec<String> = probe
        .params
        .tensors()
        .iter()
        .map(|t| t.name.clone())
        .collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut work = probe.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_tensor = String::new();
    let mut checked = 0;
    for (t, name) in names.iter().enumerate() {
        for (i, &analytic) in analytic[t].iter().enumerate() {
            let original = work.params.tensors()[t].data[i];
            work.params.tensors_mut()[t][i] = original + STEP;
            let plus = work.loss(sentence, spans, gold)?;
            work.params.tensors_mut()[t][i] = original - STEP;
            let minus = work.loss(sentence, spans, gold)?;
            work.params.tensors_mut()[t][i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic, numeric);
            checked += 1;
            if err > max_rel_err || worst_tensor.is_empty() {
                max_rel_err = max_rel_err.max(err);
                worst_tensor = name.clone();
            }
        }
    }
    Ok(GradCheckReport {
        method: probe.config.method,
        arity: probe.config.arity,
        max_rel_err,
        worst_tensor,
        checked,
    })
}

/// Worst report over `instances` random instances for each method and arity.
pub fn run_suite(
    methods: &[SpanKind],
    instances: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for &method in methods {
        for arity in [Arity::OneSpan, Arity::TwoSpan] {
            let mut worst: Option<GradCheckReport> = None;
            for k in 0..instances {
                let inst_seed = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(k as u64 * 7919 + method as u64 * 31 + arity.span_count() as u64);
                let report = check_instance(&random_instance(method, arity, inst_seed)?)?;
                if worst
                    .as_ref()
                    .is_none_or(|w| report.max_rel_err > w.max_rel_err)
                {
                    worst = Some(report);
                }
            }
            reports.extend(worst);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn every_method_passes_on_one_instance() {
        let reports = run_suite(&SpanKind::ALL, 1, 0).unwrap();
        assert_eq!(reports.len(), 12);
        for r in reports {
            assert!(r.passed(), "{r:?}");
        }
    }
}
